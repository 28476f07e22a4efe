#pragma once

#include <string_view>

namespace loctrans {

enum class LogLevel { quiet = 0, warn = 1, info = 2 };

void set_log_level(LogLevel level);
LogLevel log_level();

// Both write one line to stderr when the level allows it.
void log_warn(std::string_view message);
void log_info(std::string_view message);

} // namespace loctrans
