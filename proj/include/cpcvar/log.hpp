#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace cpcvar::log {

enum class Level { kError = 0, kInfo = 1, kDebug = 2 };

// Level comes from CPCVAR_LOG in {error, info, debug}; default info.
inline Level level() {
  static Level lvl = [] {
    const char* env = std::getenv("CPCVAR_LOG");
    if (env == nullptr) return Level::kInfo;
    if (std::strcmp(env, "error") == 0) return Level::kError;
    if (std::strcmp(env, "debug") == 0) return Level::kDebug;
    return Level::kInfo;
  }();
  return lvl;
}

template <typename... Args>
void emit(Level lvl, const char* tag, const char* fmt, Args... args) {
  if (lvl > level()) return;
  std::fprintf(stderr, "[%s] ", tag);
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

template <typename... Args>
void error(const char* fmt, Args... args) {
  emit(Level::kError, "error", fmt, args...);
}

template <typename... Args>
void info(const char* fmt, Args... args) {
  emit(Level::kInfo, "info", fmt, args...);
}

template <typename... Args>
void debug(const char* fmt, Args... args) {
  emit(Level::kDebug, "debug", fmt, args...);
}

}  // namespace cpcvar::log
