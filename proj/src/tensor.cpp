#include "fk/tensor.hpp"

#include <charconv>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace fk {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonContiguousInput: return "NonContiguousInput";
    case ErrorCode::OddHeadDim: return "OddHeadDim";
    case ErrorCode::TargetOutOfRange: return "TargetOutOfRange";
    case ErrorCode::NonFiniteProbe: return "NonFiniteProbe";
    case ErrorCode::UnbalancedFree: return "UnbalancedFree";
    case ErrorCode::ShapeTooLarge: return "ShapeTooLarge";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ParseError: return "ParseError";
  }
  return "Unknown";
}

std::string_view to_string(DType d) { return d.tag == DTypeTag::F32 ? "F32" : "F64"; }

DType parse_dtype(std::string_view s) {
  if (s == "F32" || s == "f32") return DType::f32();
  if (s == "F64" || s == "f64") return DType::f64();
  throw Error(ErrorCode::ParseError, "unknown dtype '" + std::string(s) + "'");
}

IndexWidth check_index_width(std::uint64_t rows, std::uint64_t cols) {
  constexpr std::uint64_t kInt32Max = std::numeric_limits<std::int32_t>::max();
  if (rows == 0 || cols == 0) return IndexWidth::Narrow32;
  // rows*cols - 1 > kInt32Max  <=>  rows*cols > kInt32Max + 1, evaluated without overflow.
  if (rows > (kInt32Max + 1) / cols) return IndexWidth::Wide64;
  return rows * cols - 1 > kInt32Max ? IndexWidth::Wide64 : IndexWidth::Narrow32;
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::size_t parse_count(std::string_view s) {
  s = trim(s);
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  FK_CHECK(ec == std::errc() && ptr == s.data() + s.size(), ErrorCode::ParseError,
           "bad integer '" + std::string(s) + "'");
  return v;
}

template <Real T>
T parse_real(std::string_view s) {
  s = trim(s);
  // std::from_chars for floating point is available in libstdc++ 11.
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  FK_CHECK(ec == std::errc() && ptr == s.data() + s.size(), ErrorCode::ParseError,
           "bad number '" + std::string(s) + "'");
  return v;
}

}  // namespace

template <Real T>
void write_csv(std::ostream& os, const Matrix<T>& m) {
  const Matrix<T> c = m.contiguous_copy();
  os << c.rows() << ',' << c.cols() << ',' << to_string(c.dtype()) << '\n';
  std::ostringstream line;
  line.precision(std::numeric_limits<T>::max_digits10);
  for (std::size_t i = 0; i < c.rows(); ++i) {
    line.str({});
    const auto r = c.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (j) line << ',';
      line << r[j];
    }
    os << line.str() << '\n';
  }
}

template <Real T>
Matrix<T> read_csv(std::istream& is) {
  std::string line;
  FK_CHECK(static_cast<bool>(std::getline(is, line)), ErrorCode::ParseError, "missing header line");
  const auto head = split_commas(line);
  FK_CHECK(head.size() == 3, ErrorCode::ParseError, "header must be rows,cols,dtype");
  const std::size_t rows = parse_count(head[0]);
  const std::size_t cols = parse_count(head[1]);
  const DType dt = parse_dtype(trim(head[2]));
  FK_CHECK(dt == dtype_of<T>(), ErrorCode::ParseError,
           "file holds " + std::string(to_string(dt)) + ", reader expects " +
               std::string(to_string(dtype_of<T>())));
  std::vector<T> data;
  data.reserve(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    FK_CHECK(static_cast<bool>(std::getline(is, line)), ErrorCode::ParseError,
             "expected " + std::to_string(rows) + " data rows, got " + std::to_string(i));
    const auto fields = split_commas(line);
    FK_CHECK(fields.size() == cols, ErrorCode::ParseError,
             "row " + std::to_string(i) + " has " + std::to_string(fields.size()) + " fields");
    for (auto f : fields) data.push_back(parse_real<T>(f));
  }
  return Matrix<T>(rows, cols, std::move(data));
}

template void write_csv<float>(std::ostream&, const Matrix<float>&);
template void write_csv<double>(std::ostream&, const Matrix<double>&);
template Matrix<float> read_csv<float>(std::istream&);
template Matrix<double> read_csv<double>(std::istream&);

}  // namespace fk
