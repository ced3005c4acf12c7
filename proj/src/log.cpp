#include "cachesteer/log.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>

namespace cachesteer {

LogLevel log_threshold() {
  static LogLevel level = [] {
    const char* env = std::getenv("CACHESTEER_LOG");
    if (env == nullptr) return LogLevel::error;
    if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
    if (std::strcmp(env, "info") == 0) return LogLevel::info;
    return LogLevel::error;
  }();
  return level;
}

void log_line(LogLevel level, const std::string& message) {
  static std::mutex mu;
  const char* tag = level == LogLevel::error ? "error" : level == LogLevel::info ? "info" : "debug";
  std::lock_guard<std::mutex> lock(mu);
  std::fprintf(stderr, "[%s] %s\n", tag, message.c_str());
  std::fflush(stderr);
}

}  // namespace cachesteer
