#pragma once

// Shared error types, seed derivation, hashing and the warning sink.

#include <cstdint>
#include <functional>
#include <iostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ctxmem {

inline constexpr std::string_view kToolVersion = "0.3.0";

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-facing configuration (bad flag value, unknown name, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A prompt or scoring request does not fit the model's context window.
class WindowOverflow : public Error {
 public:
  WindowOverflow(std::size_t requested, std::size_t window, std::string_view what)
      : Error(std::string(what) + ": " + std::to_string(requested) +
              " tokens exceed the context window of " + std::to_string(window)),
        requested_(requested),
        window_(window) {}

  std::size_t requested() const { return requested_; }
  std::size_t window() const { return window_; }

 private:
  std::size_t requested_;
  std::size_t window_;
};

/// Text contains a character the tokenizer cannot represent.
class TokenizeError : public Error {
 public:
  TokenizeError(std::size_t offset, char ch)
      : Error("unsupported character (code " + std::to_string(static_cast<unsigned char>(ch)) +
              ") at offset " + std::to_string(offset)),
        offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Model output could not be parsed into queries.
class ParseError : public Error {
 public:
  ParseError(std::string message, std::string raw)
      : Error(std::move(message)), raw_(std::move(raw)) {}

  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

/// Training produced a NaN or infinite loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Hashing and seeds

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h = kFnvOffset) {
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a(std::as_bytes(std::span(s.data(), s.size())), h);
}

template <typename T>
std::uint64_t fnv1a_values(std::span<const T> values, std::uint64_t h = kFnvOffset) {
  return fnv1a(std::as_bytes(values), h);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed for a named stage and index: every random stream in the
/// pipeline is derived from one root seed through these (name, index) pairs.
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view stage,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(parent ^ fnv1a(stage)) + index);
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
    v >>= 4;
  }
  return out;
}

inline std::string hash_tokens(std::span<const TokenId> tokens) {
  return hex64(fnv1a_values(tokens));
}

// ---------------------------------------------------------------------------
// Warnings

using WarningSink = std::function<void(std::string_view)>;

inline WarningSink& warning_sink() {
  static WarningSink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void warn(std::string_view msg) {
  if (warning_sink()) warning_sink()(msg);
}

/// Replaces the warning sink for the lifetime of the guard.
class ScopedWarningSink {
 public:
  explicit ScopedWarningSink(WarningSink sink) : saved_(std::move(warning_sink())) {
    warning_sink() = std::move(sink);
  }
  ~ScopedWarningSink() { warning_sink() = std::move(saved_); }
  ScopedWarningSink(const ScopedWarningSink&) = delete;
  ScopedWarningSink& operator=(const ScopedWarningSink&) = delete;

 private:
  WarningSink saved_;
};

inline TokenSequence concat(std::span<const TokenId> a, std::span<const TokenId> b) {
  TokenSequence out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace ctxmem
