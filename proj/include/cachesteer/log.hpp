#pragma once

// Leveled stderr logging. CACHESTEER_LOG selects the threshold:
// error (default), info, or debug.

#include <sstream>
#include <string>

namespace cachesteer {

enum class LogLevel : int { error = 0, info = 1, debug = 2 };

LogLevel log_threshold();
void log_line(LogLevel level, const std::string& message);

namespace detail {

template <typename... Args>
void log_fmt(LogLevel level, const Args&... args) {
  if (static_cast<int>(level) > static_cast<int>(log_threshold())) return;
  std::ostringstream os;
  (os << ... << args);
  log_line(level, os.str());
}

}  // namespace detail

template <typename... Args>
void log_error(const Args&... args) {
  detail::log_fmt(LogLevel::error, args...);
}

template <typename... Args>
void log_info(const Args&... args) {
  detail::log_fmt(LogLevel::info, args...);
}

template <typename... Args>
void log_debug(const Args&... args) {
  detail::log_fmt(LogLevel::debug, args...);
}

}  // namespace cachesteer
