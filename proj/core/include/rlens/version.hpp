#pragma once

namespace rlens {
inline constexpr const char* kVersion = "0.1.0";
}
