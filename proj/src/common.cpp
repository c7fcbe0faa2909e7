#include "mofme/common.hpp"

#include <cstdio>
#include <cstring>

namespace mofme {

std::string format_double(double v) {
  char buf[40];
  // Shortest precision that round-trips.
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    double back = 0;
    std::sscanf(buf, "%lf", &back);
    if (back == v) return buf;
  }
  return buf;
}

}  // namespace mofme
