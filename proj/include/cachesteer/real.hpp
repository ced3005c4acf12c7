#pragma once

namespace cachesteer {

// 32-bit floats throughout; the double build exists solely so gradient-check
// suites can run finite differences below float rounding noise. Enable with
// -DCACHESTEER_REAL_DOUBLE (CMake option CACHESTEER_REAL_DOUBLE).
#ifdef CACHESTEER_REAL_DOUBLE
using real = double;
#else
using real = float;
#endif

}  // namespace cachesteer
