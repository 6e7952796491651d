#pragma once

// Dense row-major matrix model shared by every operator.
//
// Activations of shape (B, T, H) are always handled as (B*T, H) matrices and
// kernels process one row at a time. Views with a non-row-major layout can be
// represented (they carry strides and contiguous() == false) so that entry
// points can reject them, but no kernel computes on strided data.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "fk/error.hpp"

namespace fk {

enum class DTypeTag { F32, F64 };

struct DType {
  DTypeTag tag;
  std::size_t byte_width;

  static constexpr DType f32() { return {DTypeTag::F32, 4}; }
  static constexpr DType f64() { return {DTypeTag::F64, 8}; }

  friend constexpr bool operator==(DType a, DType b) { return a.tag == b.tag; }
};

std::string_view to_string(DType d);
DType parse_dtype(std::string_view s);

template <typename T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Real T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return DType::f32();
  } else {
    return DType::f64();
  }
}

// Flat offset of (i, j) in a row-major buffer. Always 64-bit.
constexpr std::size_t flat_offset(std::size_t i, std::size_t j, std::size_t cols) {
  return i * cols + j;
}

template <Real T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols) : Matrix(rows, cols, std::vector<T>(rows * cols)) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), row_stride_(cols), col_stride_(1), data_(std::move(data)) {
    FK_CHECK(rows >= 1 && cols >= 1, ErrorCode::InvalidArgument,
             "matrix dimensions must be >= 1, got " + std::to_string(rows) + "x" +
                 std::to_string(cols));
    FK_CHECK(data_.size() == rows * cols, ErrorCode::SizeMismatch,
             "buffer holds " + std::to_string(data_.size()) + " elements, expected " +
                 std::to_string(rows * cols));
  }

  // A logical rows x cols view over `data` addressed as data[i*row_stride + j*col_stride].
  // Anything other than (cols, 1) is flagged non-contiguous.
  static Matrix strided_view(std::size_t rows, std::size_t cols, std::vector<T> data,
                             std::size_t row_stride, std::size_t col_stride) {
    Matrix m(rows, cols, std::move(data));
    m.row_stride_ = row_stride;
    m.col_stride_ = col_stride;
    return m;
  }

  // Same buffer laid out column-major: what a transposed-then-viewed gradient looks like.
  static Matrix column_major_view(const Matrix& src) {
    std::vector<T> buf(src.size());
    for (std::size_t i = 0; i < src.rows(); ++i)
      for (std::size_t j = 0; j < src.cols(); ++j) buf[j * src.rows() + i] = src(i, j);
    return strided_view(src.rows(), src.cols(), std::move(buf), 1, src.rows());
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool contiguous() const noexcept { return row_stride_ == cols_ && col_stride_ == 1; }
  static constexpr DType dtype() { return dtype_of<T>(); }
  std::size_t bytes() const noexcept { return data_.size() * sizeof(T); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }

  // Raw physical row: only meaningful for contiguous matrices.
  std::span<T> row(std::size_t i) noexcept { return {data_.data() + flat_offset(i, 0, cols_), cols_}; }
  std::span<const T> row(std::size_t i) const noexcept {
    return {data_.data() + flat_offset(i, 0, cols_), cols_};
  }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * row_stride_ + j * col_stride_]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * row_stride_ + j * col_stride_];
  }

  Matrix contiguous_copy() const {
    if (contiguous()) return *this;
    Matrix out(rows_, cols_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) out.data_[flat_offset(i, j, cols_)] = (*this)(i, j);
    return out;
  }

  template <Real U>
  Matrix<U> cast() const {
    const Matrix src = contiguous_copy();
    std::vector<U> buf(src.size());
    for (std::size_t k = 0; k < buf.size(); ++k) buf[k] = static_cast<U>(src.data_[k]);
    return Matrix<U>(rows_, cols_, std::move(buf));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t row_stride_ = 0;
  std::size_t col_stride_ = 1;
  std::vector<T> data_;
};

template <Real T>
Matrix<T> flatten(std::size_t batch, std::size_t seq, std::size_t hidden, std::vector<T> buffer) {
  const std::size_t expected = batch * seq * hidden;
  FK_CHECK(buffer.size() == expected, ErrorCode::SizeMismatch,
           "flatten(" + std::to_string(batch) + ", " + std::to_string(seq) + ", " +
               std::to_string(hidden) + ") needs " + std::to_string(expected) + " elements, got " +
               std::to_string(buffer.size()));
  return Matrix<T>(batch * seq, hidden, std::move(buffer));
}

// Guard called first by every fused entry point.
template <Real T>
void assert_contiguous(const Matrix<T>& m, std::string_view what = "input") {
  FK_CHECK(m.contiguous(), ErrorCode::NonContiguousInput,
           std::string(what) + " is not contiguous; materialize a contiguous copy first");
}

enum class IndexWidth { Narrow32, Wide64 };

// Wide64 once the largest flat offset no longer fits a signed 32-bit index.
IndexWidth check_index_width(std::uint64_t rows, std::uint64_t cols);

template <Real U, Real T>
std::vector<U> cast_vector(const std::vector<T>& v) {
  return std::vector<U>(v.begin(), v.end());
}

// CSV fixture format: first line "rows,cols,dtype", then one line per matrix row.
template <Real T>
void write_csv(std::ostream& os, const Matrix<T>& m);
template <Real T>
Matrix<T> read_csv(std::istream& is);

}  // namespace fk
