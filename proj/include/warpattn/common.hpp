#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace warpattn {

using Index = std::int64_t;
using Shape = std::vector<Index>;

// Invalid arguments / shape mismatches. CLI maps this to exit code 1.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values detected by the debug scanner or an audit.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File format / filesystem problems. CLI maps this to exit code 2.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

// Transient-allocation accounting for tensor buffers. Thread-local so the
// single-threaded benchmark harness sees only its own traffic.
struct AllocStats {
  std::int64_t current = 0;
  std::int64_t peak = 0;

  void on_alloc(std::int64_t bytes) {
    current += bytes;
    peak = std::max(peak, current);
  }
  void on_free(std::int64_t bytes) { current -= bytes; }
  void reset_peak() { peak = current; }
};

inline AllocStats& alloc_stats() {
  static thread_local AllocStats stats;
  return stats;
}

// Debug-mode NaN/Inf scanning after every op. Off by default so timing runs
// stay clean; WARPATTN_DEBUG=1 or a scoped guard turns it on.
inline bool& debug_checks_flag() {
  static thread_local bool flag = [] {
    const char* env = std::getenv("WARPATTN_DEBUG");
    return env != nullptr && env[0] == '1';
  }();
  return flag;
}

inline bool debug_checks_enabled() { return debug_checks_flag(); }

struct DebugChecksGuard {
  bool saved;
  explicit DebugChecksGuard(bool enable) : saved(debug_checks_flag()) {
    debug_checks_flag() = enable;
  }
  ~DebugChecksGuard() { debug_checks_flag() = saved; }
};

}  // namespace warpattn
