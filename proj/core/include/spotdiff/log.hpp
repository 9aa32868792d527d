#pragma once

#include <string>

namespace spotdiff {

enum class LogLevel { kQuiet = 0, kWarn = 1, kInfo = 2 };

void set_log_level(LogLevel level);
LogLevel log_level();

void log_info(const std::string& message);
void log_warn(const std::string& message);

}  // namespace spotdiff
