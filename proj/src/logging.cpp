#include "coopercept/logging.hpp"

#include <cstdarg>
#include <cstdlib>
#include <cstring>

namespace coopercept {

namespace {

LogLevel parse_env_level() {
  const char* v = std::getenv("COOPERCEPT_LOG");
  if (v == nullptr) return LogLevel::Error;
  if (std::strcmp(v, "debug") == 0) return LogLevel::Debug;
  if (std::strcmp(v, "info") == 0) return LogLevel::Info;
  return LogLevel::Error;
}

LogLevel g_level = parse_env_level();

}  // namespace

LogLevel log_level() { return g_level; }
void set_log_level(LogLevel lv) { g_level = lv; }

void log_msg(LogLevel lv, const char* fmt, ...) {
  if (static_cast<int>(lv) > static_cast<int>(g_level)) return;
  const char* tag = lv == LogLevel::Error ? "error" : (lv == LogLevel::Info ? "info" : "debug");
  std::fprintf(stderr, "[%s] ", tag);
  va_list args;
  va_start(args, fmt);
  std::vfprintf(stderr, fmt, args);
  va_end(args);
  std::fprintf(stderr, "\n");
}

}  // namespace coopercept
