#pragma once

#include <cstddef>

namespace pnlab {

// Special token ids, fixed by convention so that model-side guards and
// corpus-side vocabulary construction agree without a shared object.
inline constexpr size_t kClsTokenId = 0;
inline constexpr size_t kMaskTokenId = 1;
inline constexpr size_t kPadTokenId = 2;
inline constexpr size_t kDigitTokenBase = 3;  // ids 3..12 are digits 0..9
inline constexpr size_t kNumSpecialTokens = 3;
inline constexpr size_t kNumDigitTokens = 10;

inline constexpr size_t digit_token_id(size_t digit) { return kDigitTokenBase + digit; }

}  // namespace pnlab
