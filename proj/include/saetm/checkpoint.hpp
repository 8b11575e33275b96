#pragma once

// SAE checkpoint container.
//
//   "SAETM1"                      6 bytes
//   u32 d_in, u32 n_features, u32 activation kind, u32 k
//   f32 l1_beta
//   u8 has_threshold, f32 inference_threshold
//   i64 trained_steps
//   f32 W_enc (d_in x K, row-major), f32 b_enc (K),
//   f32 W_dec (K x d_in, row-major), f32 b_dec (d_in)
//
// All values little-endian.

#include "saetm/binary_io.hpp"
#include "saetm/sae.hpp"

namespace saetm::sae {

inline constexpr std::string_view kCheckpointMagic = "SAETM1";

template <typename Scalar>
std::vector<unsigned char> checkpoint_bytes(const SaeModel<Scalar>& model) {
  io::ByteWriter w;
  w.magic(kCheckpointMagic);
  w.put(static_cast<std::uint32_t>(model.d_in()));
  w.put(static_cast<std::uint32_t>(model.n_features()));
  w.put(static_cast<std::uint32_t>(model.activation.kind));
  w.put(static_cast<std::uint32_t>(model.activation.k));
  w.put(static_cast<float>(model.activation.l1_beta));
  w.put(static_cast<std::uint8_t>(model.inference_threshold ? 1 : 0));
  w.put(static_cast<float>(model.inference_threshold.value_or(Scalar(0))));
  w.put(static_cast<std::int64_t>(model.trained_steps));
  w.put_f32_block(model.w_enc);
  w.put_f32_block(model.b_enc.transpose());
  w.put_f32_block(model.w_dec);
  w.put_f32_block(model.b_dec.transpose());
  return w.bytes();
}

template <typename Scalar>
SaeModel<Scalar> parse_checkpoint(std::vector<unsigned char> bytes) {
  io::ByteReader r(std::move(bytes));
  require(r.magic(kCheckpointMagic), ErrorCode::Checkpoint, "bad checkpoint magic");
  SaeModel<Scalar> m;
  const auto d_in = r.get<std::uint32_t>();
  const auto n_features = r.get<std::uint32_t>();
  const auto kind = r.get<std::uint32_t>();
  require(kind <= 2, ErrorCode::Checkpoint, "unknown activation kind " + std::to_string(kind));
  m.activation.kind = static_cast<ActivationKind>(kind);
  m.activation.k = static_cast<int>(r.get<std::uint32_t>());
  m.activation.l1_beta = static_cast<double>(r.get<float>());
  const bool has_threshold = r.get<std::uint8_t>() != 0;
  const auto threshold = r.get<float>();
  if (has_threshold) m.inference_threshold = static_cast<Scalar>(threshold);
  m.trained_steps = r.get<std::int64_t>();

  const std::size_t expected =
      4 * (static_cast<std::size_t>(d_in) * n_features * 2 + n_features + d_in);
  require(r.remaining() == expected, ErrorCode::Checkpoint,
          "parameter payload is " + std::to_string(r.remaining()) + " bytes, expected " +
              std::to_string(expected));
  m.w_enc.resize(d_in, n_features);
  m.b_enc.resize(n_features);
  m.w_dec.resize(n_features, d_in);
  m.b_dec.resize(d_in);
  r.get_f32_block(m.w_enc);
  r.get_f32_block(m.b_enc);
  r.get_f32_block(m.w_dec);
  r.get_f32_block(m.b_dec);
  return m;
}

template <typename Scalar>
void save_checkpoint(const SaeModel<Scalar>& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, checkpoint_bytes(model));
}

template <typename Scalar>
SaeModel<Scalar> load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint<Scalar>(io::read_file(path));
}

}  // namespace saetm::sae
