#pragma once

namespace exact {

inline constexpr const char* toolkit_name = "exact_alloc";
inline constexpr const char* toolkit_version = "0.1.0";

}  // namespace exact
