#pragma once

namespace preb {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace preb
