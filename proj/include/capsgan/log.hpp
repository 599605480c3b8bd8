#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace capsgan {

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level comes from CAPSGAN_LOG (error|info|debug); defaults to info.
inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("CAPSGAN_LOG");
    if (env == nullptr) return LogLevel::info;
    if (std::strcmp(env, "error") == 0) return LogLevel::error;
    if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
    return LogLevel::info;
  }();
  return level;
}

inline void log_line(LogLevel lvl, const std::string& msg) {
  if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
  const char* tag = lvl == LogLevel::error ? "error" : lvl == LogLevel::info ? "info" : "debug";
  std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void log_error(const std::string& msg) { log_line(LogLevel::error, msg); }
inline void log_info(const std::string& msg) { log_line(LogLevel::info, msg); }
inline void log_debug(const std::string& msg) { log_line(LogLevel::debug, msg); }

}  // namespace capsgan
