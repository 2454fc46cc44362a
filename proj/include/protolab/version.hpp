#pragma once

namespace protolab {
inline constexpr const char kVersion[] = "0.1.0";
}
