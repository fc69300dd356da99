#include "apod/common.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace apod {

namespace {
std::atomic<LogLevel> g_level{LogLevel::warning};
std::mutex g_log_mutex;
}  // namespace

void set_log_level(LogLevel level) { g_level = level; }

LogLevel log_level() { return g_level; }

void log_warning(const std::string& message) {
    if (g_level.load() == LogLevel::quiet) return;
    std::lock_guard lock(g_log_mutex);
    std::clog << "[apod] warning: " << message << '\n';
}

void log_info(const std::string& message) {
    if (g_level.load() != LogLevel::info) return;
    std::lock_guard lock(g_log_mutex);
    std::clog << "[apod] " << message << '\n';
}

}  // namespace apod
