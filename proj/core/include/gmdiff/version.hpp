#pragma once

namespace gmdiff {
inline constexpr const char* kVersion = "0.1.0";
}
