#pragma once

#include <cstdio>

namespace coopercept {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Level comes from COOPERCEPT_LOG={error,info,debug}; default error.
LogLevel log_level();
void set_log_level(LogLevel lv);

void log_msg(LogLevel lv, const char* fmt, ...);

#define COOP_LOG_ERROR(...) ::coopercept::log_msg(::coopercept::LogLevel::Error, __VA_ARGS__)
#define COOP_LOG_INFO(...) ::coopercept::log_msg(::coopercept::LogLevel::Info, __VA_ARGS__)
#define COOP_LOG_DEBUG(...) ::coopercept::log_msg(::coopercept::LogLevel::Debug, __VA_ARGS__)

}  // namespace coopercept
