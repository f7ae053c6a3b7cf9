#include <algorithm>
#include <cmath>
#include <set>

#include "cpcvar/errors.hpp"
#include "cpcvar/harness.hpp"

namespace cpcvar {

namespace world {

namespace {

const char* kWords[kBaseVocab] = {
    "a",      "photo",   "of",      "on",     "background", "in",     "style",  "the",
    "circle", "square",  "triangle", "cross",  "ring",       "bar",    "red",    "green",
    "blue",   "yellow",  "magenta", "cyan",   "plain",      "dots",   "stripes", "checker",
    "hatched", "tinted", "pad0",    "pad1",   "pad2",       "pad3",   "pad4",   "pad5"};

const Rgb kPalette[kNumColors] = {
    {0.85, 0.15, 0.15},  // red
    {0.15, 0.80, 0.20},  // green
    {0.15, 0.25, 0.85},  // blue
    {0.90, 0.85, 0.20},  // yellow
    {0.85, 0.20, 0.80},  // magenta
    {0.15, 0.80, 0.85},  // cyan
};

bool inside_shape(int shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:  // circle
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::fabs(dx) <= r && std::fabs(dy) <= r;
    case 2: {  // upward triangle
      if (dy < -r || dy > r) return false;
      double half_width = (dy + r) / (2.0 * r) * r;
      return std::fabs(dx) <= half_width;
    }
    case 3:  // cross
      return (std::fabs(dx) <= r / 3.0 && std::fabs(dy) <= r) ||
             (std::fabs(dy) <= r / 3.0 && std::fabs(dx) <= r);
    case 4: {  // ring
      double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
    }
    case 5:  // horizontal bar
      return std::fabs(dy) <= r / 2.5 && std::fabs(dx) <= r;
    default:
      throw ConfigError("render_scene: unknown shape " + std::to_string(shape));
  }
}

// Textures modulate foreground pixels on an 8px lattice, coarse enough to
// survive the 4x patch tokenizer; each texture has a distinct secondary tone
// so signatures separate in pooled color statistics as well as layout.
bool texture_hit(int texture, int64_t x, int64_t y) {
  switch (texture) {
    case 0:  // plain
      return false;
    case 1: {  // dots
      int64_t mx = x % 8 - 4, my = y % 8 - 4;
      return mx * mx + my * my <= 6;
    }
    case 2:  // vertical stripes
      return (x % 8) < 4;
    case 3:  // checker
      return ((x / 4 + y / 4) % 2) == 0;
    default:
      throw ConfigError("render_scene: unknown texture " + std::to_string(texture));
  }
}

Rgb texture_tone(int texture, const Rgb& fg) {
  switch (texture) {
    case 1:  // dark dots
      return {fg.r * 0.25, fg.g * 0.25, fg.b * 0.25};
    case 2:  // whitened stripes
      return {fg.r * 0.25 + 0.72, fg.g * 0.25 + 0.72, fg.b * 0.25 + 0.72};
    case 3:  // complementary checker
      return {0.9 - 0.8 * fg.r, 0.9 - 0.8 * fg.g, 0.9 - 0.8 * fg.b};
    default:
      return fg;
  }
}

}  // namespace

const char* word_name(int64_t id) {
  if (id < 0 || id >= kBaseVocab) throw StateError("word_name: id out of range");
  return kWords[id];
}

std::optional<int64_t> word_id(const std::string& word) {
  for (int64_t i = 0; i < kBaseVocab; ++i)
    if (word == kWords[i]) return i;
  return std::nullopt;
}

Rgb palette_color(int index) {
  if (index < 0 || index >= kNumColors) throw StateError("palette_color: index out of range");
  return kPalette[index];
}

int classify_color(const Rgb& value) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kNumColors; ++i) {
    double dr = value.r - kPalette[i].r;
    double dg = value.g - kPalette[i].g;
    double db = value.b - kPalette[i].b;
    double d = dr * dr + dg * dg + db * db;
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

Image render_scene(const SceneSpec& spec, int64_t size) {
  Rgb bg = palette_color(spec.bg_color);
  Rgb fg = palette_color(spec.fg_color);
  Rgb tone = texture_tone(spec.texture, fg);

  Image img(size, size);
  double cx = spec.center_x * static_cast<double>(size);
  double cy = spec.center_y * static_cast<double>(size);
  double r = spec.radius * static_cast<double>(size);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      double dx = (static_cast<double>(x) + 0.5) - cx;
      double dy = (static_cast<double>(y) + 0.5) - cy;
      Rgb c = bg;
      if (inside_shape(spec.shape, dx, dy, r))
        c = texture_hit(spec.texture, x, y) ? tone : fg;
      img.at(y, x, 0) = c.r;
      img.at(y, x, 1) = c.g;
      img.at(y, x, 2) = c.b;
    }
  if (spec.style == 0) img = apply_hatch(std::move(img));
  if (spec.style == 1) img = apply_tint(std::move(img));
  return img;
}

Image apply_hatch(Image image) {
  for (int64_t y = 0; y < image.height; ++y)
    for (int64_t x = 0; x < image.width; ++x)
      if ((x + y) % 6 < 2)
        for (int64_t ch = 0; ch < 3; ++ch) image.at(y, x, ch) *= 0.35;
  return image;
}

Image apply_tint(Image image) {
  for (int64_t y = 0; y < image.height; ++y)
    for (int64_t x = 0; x < image.width; ++x) {
      double r = image.at(y, x, 0), g = image.at(y, x, 1), b = image.at(y, x, 2);
      double lum = 0.299 * r + 0.587 * g + 0.114 * b;
      image.at(y, x, 0) = std::clamp(0.45 * r + 0.5 * lum + 0.08, 0.0, 1.0);
      image.at(y, x, 1) = std::clamp(0.45 * g + 0.2 * lum, 0.0, 1.0);
      image.at(y, x, 2) = std::clamp(0.45 * b + 0.55 * lum + 0.08, 0.0, 1.0);
    }
  return image;
}

}  // namespace world

// ---- concepts ----

std::string ConceptDescriptor::signature() const {
  if (kind == ConceptKind::kStyle) return "style:" + std::to_string(style_kind);
  return "object:" + std::to_string(shape) + ":" + std::to_string(fg_color) + ":" +
         std::to_string(texture);
}

std::vector<ConceptDataset> generate_concepts(const ConceptSpec& spec, uint64_t seed) {
  if (spec.object_concepts + spec.style_concepts < 2)
    throw ConfigError("generate_concepts: need at least 2 concepts");
  if (spec.references_per_concept < 3 || spec.references_per_concept > 5)
    throw ConfigError("generate_concepts: references per concept must be in [3,5]");

  // Fixed signature pool; the first two form the hard pair (same shape and
  // palette, different texture).
  const int pool[][3] = {
      {0, 0, 1},  // circle, red, dots
      {0, 0, 2},  // circle, red, stripes  (hard-pair partner)
      {1, 2, 0},  // square, blue, plain
      {2, 1, 3},  // triangle, green, checker
      {5, 3, 0},  // bar, yellow, plain
      {3, 5, 1},  // cross, cyan, dots
  };
  if (spec.object_concepts > 6 || spec.style_concepts > 2)
    throw ConfigError("generate_concepts: pool supports up to 6 object and 2 style concepts");

  std::vector<ConceptDataset> out;
  std::set<std::string> signatures;
  int concept_index = 1;

  for (int i = 0; i < spec.object_concepts; ++i, ++concept_index) {
    ConceptDataset ds;
    ds.descriptor.name = "<c" + std::to_string(concept_index) + ">";
    ds.descriptor.kind = ConceptKind::kObject;
    ds.descriptor.shape = pool[i][0];
    ds.descriptor.fg_color = pool[i][1];
    ds.descriptor.texture = pool[i][2];
    if (!signatures.insert(ds.descriptor.signature()).second)
      throw StateError("generate_concepts: duplicate concept signature " +
                       ds.descriptor.signature());

    Rng rng = Rng::stream(seed, "concept" + std::to_string(concept_index));
    for (int j = 0; j < spec.references_per_concept; ++j) {
      world::SceneSpec scene;
      scene.shape = ds.descriptor.shape;
      scene.fg_color = ds.descriptor.fg_color;
      scene.texture = ds.descriptor.texture;
      int bg = (ds.descriptor.fg_color + 1 + j) % world::kNumColors;
      if (bg == ds.descriptor.fg_color) bg = (bg + 1) % world::kNumColors;
      scene.bg_color = bg;
      scene.center_x = 0.5 + rng.uniform(-0.08, 0.08);
      scene.center_y = 0.5 + rng.uniform(-0.08, 0.08);
      scene.radius = rng.uniform(0.30, 0.38);
      ds.references.push_back(world::render_scene(scene));
      ds.reference_bg.push_back(bg);
    }
    out.push_back(std::move(ds));
  }

  for (int i = 0; i < spec.style_concepts; ++i, ++concept_index) {
    ConceptDataset ds;
    ds.descriptor.name = "<c" + std::to_string(concept_index) + ">";
    ds.descriptor.kind = ConceptKind::kStyle;
    ds.descriptor.style_kind = i;
    if (!signatures.insert(ds.descriptor.signature()).second)
      throw StateError("generate_concepts: duplicate concept signature " +
                       ds.descriptor.signature());

    Rng rng = Rng::stream(seed, "concept" + std::to_string(concept_index));
    for (int j = 0; j < spec.references_per_concept; ++j) {
      world::SceneSpec scene;
      scene.shape = j % world::kNumShapes;
      scene.fg_color = (2 * j + 1) % world::kNumColors;
      scene.texture = 0;
      scene.bg_color = (scene.fg_color + 3) % world::kNumColors;
      scene.center_x = 0.5 + rng.uniform(-0.08, 0.08);
      scene.center_y = 0.5 + rng.uniform(-0.08, 0.08);
      scene.radius = rng.uniform(0.30, 0.38);
      scene.style = ds.descriptor.style_kind;
      ds.references.push_back(world::render_scene(scene));
      ds.reference_bg.push_back(scene.bg_color);
      // record fg/shape of the last reference for eval prompt templating
      ds.descriptor.shape = scene.shape;
      ds.descriptor.fg_color = scene.fg_color;
    }
    out.push_back(std::move(ds));
  }
  return out;
}

// ---- proxy metrics ----

namespace {

// 3x3 stride-2 correlation with zero padding 1.
std::vector<double> conv3x3_s2(const std::vector<double>& in, int64_t h, int64_t w, int64_t cin,
                               const std::vector<double>& kernel, int64_t cout, bool nonlinear) {
  int64_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  std::vector<double> out(static_cast<size_t>(oh * ow * cout), 0.0);
  for (int64_t oy = 0; oy < oh; ++oy)
    for (int64_t ox = 0; ox < ow; ++ox)
      for (int64_t co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (int64_t ky = 0; ky < 3; ++ky)
          for (int64_t kx = 0; kx < 3; ++kx) {
            int64_t iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
            for (int64_t ci = 0; ci < cin; ++ci)
              acc += in[static_cast<size_t>((iy * w + ix) * cin + ci)] *
                     kernel[static_cast<size_t>(((co * 3 + ky) * 3 + kx) * cin + ci)];
          }
        if (nonlinear) acc = 0.5 * acc * (1.0 + std::erf(acc * 0.7071067811865475));
        out[static_cast<size_t>((oy * ow + ox) * cout + co)] = acc;
      }
  return out;
}

}  // namespace

RandomFeatureExtractor RandomFeatureExtractor::make(uint64_t seed, bool linear) {
  RandomFeatureExtractor ex;
  ex.linear_ = linear;
  Rng rng(seed);
  double std1 = 1.0 / std::sqrt(27.0);
  double std2 = 1.0 / std::sqrt(9.0 * static_cast<double>(ex.mid_channels_));
  ex.k1_ = rng.normal_vec(static_cast<size_t>(ex.mid_channels_ * 9 * 3), 0.0, std1);
  ex.k2_ = rng.normal_vec(static_cast<size_t>(ex.out_channels_ * 9 * ex.mid_channels_), 0.0, std2);
  if (!linear) {
    // probe-world mean over a fixed grid of procedural scenes
    std::vector<std::vector<double>> probes;
    Rng jitter(seed ^ 0xfeed);
    for (int shape = 0; shape < world::kNumShapes; ++shape)
      for (int color = 0; color < world::kNumColors; ++color) {
        world::SceneSpec scene;
        scene.shape = shape;
        scene.fg_color = color;
        scene.texture = static_cast<int>(jitter.below(world::kNumTextures));
        scene.bg_color = (color + 1 + static_cast<int>(jitter.below(4))) % world::kNumColors;
        scene.radius = 0.3;
        probes.push_back(ex.raw_features(world::render_scene(scene)));
      }
    ex.center_.assign(probes[0].size(), 0.0);
    for (const auto& p : probes)
      for (size_t i = 0; i < p.size(); ++i) ex.center_[i] += p[i];
    for (auto& v : ex.center_) v /= static_cast<double>(probes.size());
  }
  return ex;
}

std::vector<double> RandomFeatureExtractor::raw_features(const Image& image) const {
  auto h1 = conv3x3_s2(image.pixels, image.height, image.width, 3, k1_, mid_channels_, !linear_);
  int64_t oh = (image.height + 1) / 2, ow = (image.width + 1) / 2;
  auto h2 = conv3x3_s2(h1, oh, ow, mid_channels_, k2_, out_channels_, !linear_);
  int64_t oh2 = (oh + 1) / 2, ow2 = (ow + 1) / 2;
  std::vector<double> mean(static_cast<size_t>(out_channels_), 0.0);
  for (int64_t i = 0; i < oh2 * ow2; ++i)
    for (int64_t c = 0; c < out_channels_; ++c)
      mean[static_cast<size_t>(c)] += h2[static_cast<size_t>(i * out_channels_ + c)];
  for (auto& v : mean) v /= static_cast<double>(oh2 * ow2);
  if (linear_) return mean;

  // deviation channels carry texture energy that mean pooling discards
  std::vector<double> out(static_cast<size_t>(2 * out_channels_), 0.0);
  std::copy(mean.begin(), mean.end(), out.begin());
  for (int64_t i = 0; i < oh2 * ow2; ++i)
    for (int64_t c = 0; c < out_channels_; ++c) {
      double d = h2[static_cast<size_t>(i * out_channels_ + c)] - mean[static_cast<size_t>(c)];
      out[static_cast<size_t>(out_channels_ + c)] += d * d;
    }
  for (int64_t c = 0; c < out_channels_; ++c)
    out[static_cast<size_t>(out_channels_ + c)] =
        std::sqrt(out[static_cast<size_t>(out_channels_ + c)] / static_cast<double>(oh2 * ow2));
  return out;
}

std::vector<double> RandomFeatureExtractor::features(const Image& image) const {
  auto f = raw_features(image);
  if (!center_.empty())
    for (size_t i = 0; i < f.size(); ++i) f[i] -= center_[i];
  return f;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double proxy_subject_fidelity(const RandomFeatureExtractor& extractor,
                              const std::vector<Image>& generated,
                              const std::vector<Image>& references) {
  if (generated.empty() || references.empty())
    throw StateError("proxy_subject_fidelity: empty image set");
  std::vector<std::vector<double>> gen_feats, ref_feats;
  for (const auto& img : generated) gen_feats.push_back(extractor.features(img));
  for (const auto& img : references) ref_feats.push_back(extractor.features(img));
  double acc = 0.0;
  for (const auto& g : gen_feats)
    for (const auto& r : ref_feats) acc += cosine_similarity(g, r);
  return acc / static_cast<double>(gen_feats.size() * ref_feats.size());
}

double proxy_prompt_fidelity(const std::vector<Image>& generated,
                             const std::vector<int>& expected_bg) {
  if (generated.size() != expected_bg.size())
    throw ShapeError("proxy_prompt_fidelity: size mismatch");
  if (generated.empty()) throw StateError("proxy_prompt_fidelity: empty image set");
  int hits = 0, total = 0;
  for (size_t i = 0; i < generated.size(); ++i) {
    if (expected_bg[i] < 0) continue;  // prompt names no background
    const Image& img = generated[i];
    double r = 0, g = 0, b = 0;
    int64_t count = 0;
    for (int64_t y = 0; y < img.height; ++y)
      for (int64_t x = 0; x < img.width; ++x) {
        bool border = y < 2 || x < 2 || y >= img.height - 2 || x >= img.width - 2;
        if (!border) continue;
        r += img.at(y, x, 0);
        g += img.at(y, x, 1);
        b += img.at(y, x, 2);
        ++count;
      }
    world::Rgb mean{r / count, g / count, b / count};
    hits += (world::classify_color(mean) == expected_bg[i]) ? 1 : 0;
    ++total;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace cpcvar
