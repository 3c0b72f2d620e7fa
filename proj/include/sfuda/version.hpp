#pragma once

namespace sfuda {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace sfuda
