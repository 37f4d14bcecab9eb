#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "aotp/numerics.hpp"
#include "aotp/tensor.hpp"

namespace aotp {

// Frozen backbone dimensions.
struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_mult = 4;
  std::size_t max_seq = 512;
  Activation activation = Activation::gelu;
  TokenId pad_id = 0;
  double ln_eps = 1e-5;

  std::size_t head_dim() const noexcept { return hidden / heads; }
  std::size_t ffn_dim() const noexcept { return ffn_mult * hidden; }

  // Throws ConfigError when an invariant is broken.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Storage precision of fused tables and weight blobs.
enum class DType : std::uint8_t { f32 = 0, f16 = 1 };

constexpr std::size_t dtype_bytes(DType t) noexcept { return t == DType::f16 ? 2 : 4; }
constexpr std::size_t dtype_bits(DType t) noexcept { return dtype_bytes(t) * 8; }

DType dtype_from_bits(int bits);

}  // namespace aotp
