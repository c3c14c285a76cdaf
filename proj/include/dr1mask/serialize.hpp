#pragma once

// Little-endian binary encoding of named tensors, shared by checkpoints and scene files.
//
// Record layout:
//   u32 name_length, name bytes (UTF-8)
//   u8  dtype (0 = single, 1 = double)
//   u32 rank, rank x u32 extents
//   raw values, extent product many, in row-major order

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>

#include "dr1mask/tensor.hpp"

namespace dr1mask {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

/// Malformed binary input; carries the byte offset where decoding failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void i32(std::int32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& buffer() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view buf) : buf_(buf) {}

  void bytes(void* p, std::size_t n) {
    if (buf_.size() - pos_ < n) {
      throw ParseError("unexpected end of data reading " + std::to_string(n) + " bytes", pos_);
    }
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::int32_t i32() { return get<std::int32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }
  std::string str() {
    const std::size_t at = pos_;
    const std::uint32_t n = u32();
    if (buf_.size() - pos_ < n) throw ParseError("string length " + std::to_string(n) + " overruns data", at);
    std::string s(buf_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  template <typename T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::string_view buf_;
  std::size_t pos_ = 0;
};

template <typename Scalar>
void write_tensor(ByteWriter& out, std::string_view name, const Tensor<Scalar>& t) {
  out.str(name);
  out.u8(static_cast<std::uint8_t>(Tensor<Scalar>::kDType));
  out.u32(4);
  const auto& s = t.shape();
  for (Index e : {s.n, s.c, s.h, s.w}) out.u32(static_cast<std::uint32_t>(e));
  out.bytes(t.raw(), static_cast<std::size_t>(t.size()) * sizeof(Scalar));
}

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

/// Reads one record; a stored dtype other than Scalar is rejected. Ranks below 4 are
/// left-padded with unit extents.
template <typename Scalar>
NamedTensor<Scalar> read_tensor(ByteReader& in) {
  NamedTensor<Scalar> r;
  r.name = in.str();
  const std::size_t dtype_at = in.offset();
  const std::uint8_t tag = in.u8();
  if (tag > 1) throw ParseError("unknown dtype tag " + std::to_string(tag), dtype_at);
  if (tag != static_cast<std::uint8_t>(Tensor<Scalar>::kDType)) {
    throw ParseError("tensor '" + r.name + "' has dtype tag " + std::to_string(tag) +
                         ", expected " + std::to_string(static_cast<int>(Tensor<Scalar>::kDType)),
                     dtype_at);
  }
  const std::size_t rank_at = in.offset();
  const std::uint32_t rank = in.u32();
  if (rank > 4) throw ParseError("tensor rank " + std::to_string(rank) + " exceeds 4", rank_at);
  std::array<Index, 4> ext{1, 1, 1, 1};
  for (std::uint32_t i = 0; i < rank; ++i) ext[4 - rank + i] = in.u32();
  const Shape shape{ext[0], ext[1], ext[2], ext[3]};
  const std::size_t bytes = static_cast<std::size_t>(shape.numel()) * sizeof(Scalar);
  if (in.remaining() < bytes) {
    throw ParseError("tensor '" + r.name + "' payload of " + std::to_string(bytes) +
                         " bytes overruns data",
                     in.offset());
  }
  r.tensor = Tensor<Scalar>(shape);
  in.bytes(r.tensor.raw(), bytes);
  return r;
}

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

/// Filesystem failure (missing file, unwritable directory).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dr1mask
