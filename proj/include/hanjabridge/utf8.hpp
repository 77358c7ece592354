#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace hb::utf8 {

// Decodes UTF-8 into code points. Throws std::invalid_argument on malformed input
// (overlong forms, surrogates, truncated sequences, values above U+10FFFF).
std::u32string decode(std::string_view text);

std::string encode(char32_t cp);
std::string encode(std::u32string_view cps);

// Number of code points; throws like decode().
std::size_t length(std::string_view text);

bool is_valid(std::string_view text);

// Whitespace never becomes part of a token.
constexpr bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\v' || c == U'\f' ||
         c == U'\u00A0' || c == U'\u3000';
}

constexpr bool is_hangul_syllable(char32_t c) { return c >= 0xAC00 && c <= 0xD7A3; }

constexpr bool is_cjk_ideograph(char32_t c) {
  return (c >= 0x4E00 && c <= 0x9FFF) || (c >= 0x3400 && c <= 0x4DBF) ||
         (c >= 0xF900 && c <= 0xFAFF) || (c >= 0x20000 && c <= 0x2FA1F);
}

}  // namespace hb::utf8
