#pragma once

namespace seqrec {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace seqrec
