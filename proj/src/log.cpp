#include "loctrans/log.hpp"

#include <atomic>
#include <iostream>

namespace loctrans {

namespace {
std::atomic<LogLevel> g_level{LogLevel::warn};
}

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_warn(std::string_view message) {
    if (g_level >= LogLevel::warn) std::cerr << "warning: " << message << '\n';
}

void log_info(std::string_view message) {
    if (g_level >= LogLevel::info) std::cerr << message << '\n';
}

} // namespace loctrans
