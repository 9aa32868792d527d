#include "spotdiff/log.hpp"

#include <atomic>
#include <iostream>

namespace spotdiff {

namespace {
std::atomic<int> g_level{static_cast<int>(LogLevel::kWarn)};
}

void set_log_level(LogLevel level) { g_level = static_cast<int>(level); }
LogLevel log_level() { return static_cast<LogLevel>(g_level.load()); }

void log_info(const std::string& message) {
  if (g_level >= static_cast<int>(LogLevel::kInfo)) std::cerr << "[spotdiff] " << message << '\n';
}

void log_warn(const std::string& message) {
  if (g_level >= static_cast<int>(LogLevel::kWarn)) std::cerr << "[spotdiff] warning: " << message << '\n';
}

}  // namespace spotdiff
