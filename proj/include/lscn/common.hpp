#pragma once

#include <cstdint>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>

namespace lscn {

inline constexpr const char* kVersion = "0.1.0";

/// Raised when an input violates a stated invariant. `record()` names the
/// offending entry (annotation id, detection index, config key, ...).
class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::string record, const std::string& message)
      : std::runtime_error(record.empty() ? message : record + ": " + message),
        record_(std::move(record)) {}

  const std::string& record() const noexcept { return record_; }

 private:
  std::string record_;
};

/// Failure during a computation whose inputs were valid (I/O, divergence).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public RuntimeFailure {
 public:
  DivergenceError(std::uint64_t batch_seed, std::size_t iteration, const std::string& what)
      : RuntimeFailure(what + " (iteration " + std::to_string(iteration) + ", batch seed " +
                       std::to_string(batch_seed) + ")"),
        batch_seed_(batch_seed),
        iteration_(iteration) {}

  std::uint64_t batch_seed() const noexcept { return batch_seed_; }
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::uint64_t batch_seed_;
  std::size_t iteration_;
};

enum class LogLevel { kDebug = 0, kInfo = 1, kWarning = 2, kError = 3 };

namespace detail {

struct LogState {
  std::mutex mutex;
  LogLevel threshold = LogLevel::kWarning;
  std::function<void(LogLevel, const std::string&)> sink;
};

inline LogState& log_state() {
  static LogState state;
  return state;
}

inline const char* level_name(LogLevel level) {
  switch (level) {
    case LogLevel::kDebug: return "debug";
    case LogLevel::kInfo: return "info";
    case LogLevel::kWarning: return "warning";
    case LogLevel::kError: return "error";
  }
  return "?";
}

}  // namespace detail

inline void set_log_level(LogLevel level) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mutex);
  s.threshold = level;
}

/// Replaces the default stderr sink; pass an empty function to restore it.
/// The sink receives every message regardless of the level threshold.
inline void set_log_sink(std::function<void(LogLevel, const std::string&)> sink) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mutex);
  s.sink = std::move(sink);
}

inline void log(LogLevel level, const std::string& message) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mutex);
  if (s.sink) {
    s.sink(level, message);
    return;
  }
  if (level >= s.threshold) std::clog << "[lscn " << detail::level_name(level) << "] " << message << '\n';
}

inline void log_warning(const std::string& message) { log(LogLevel::kWarning, message); }
inline void log_info(const std::string& message) { log(LogLevel::kInfo, message); }

}  // namespace lscn
