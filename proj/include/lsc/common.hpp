#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsc {

class error : public std::runtime_error {
 public:
  explicit error(const std::string& what) : std::runtime_error(what) {}
};

#define LSC_CHECK(cond, msg)                   \
  do {                                         \
    if (!(cond)) {                             \
      std::ostringstream oss__;                \
      oss__ << msg;                            \
      throw ::lsc::error(oss__.str());         \
    }                                          \
  } while (0)

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Shortest round-trip decimal form; locale-free, used by every CSV/JSON writer
// so identical runs produce identical bytes.
inline std::string num_str(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string num_str(float v) { return num_str(static_cast<double>(v)); }

template <class R>
bool all_finite(const std::vector<R>& v) {
  for (R x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace lsc
