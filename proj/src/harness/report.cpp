#include "fk/harness/report.hpp"

#include <map>
#include <ostream>
#include <tuple>

namespace fk::harness {

std::vector<ReportRow> aggregate(const std::vector<BenchRecord>& records) {
  using Key = std::tuple<std::string, std::size_t, std::size_t, std::string>;  // op, rows, cols, mode
  std::map<Key, const BenchRecord*> fused;
  std::map<Key, const BenchRecord*> reference;
  std::vector<Key> order;
  for (const auto& r : records) {
    const Key k{r.op, r.rows, r.cols, r.mode};
    FK_CHECK(r.variant == "fused" || r.variant == "reference", ErrorCode::SchemaMismatch,
             "unknown variant '" + r.variant + "'");
    auto& slot = r.variant == "fused" ? fused : reference;
    if (!fused.contains(k) && !reference.contains(k)) order.push_back(k);
    slot[k] = &r;  // later files win
  }

  std::vector<ReportRow> out;
  for (const auto& k : order) {
    const auto f = fused.find(k);
    const auto r = reference.find(k);
    if (f == fused.end() || r == reference.end()) continue;
    const BenchRecord& a = *f->second;
    const BenchRecord& b = *r->second;
    ReportRow row;
    row.op = a.op;
    row.shape = std::to_string(a.rows) + "x" + std::to_string(a.cols);
    row.speedup = a.median_ns > 0.0 ? b.median_ns / a.median_ns : 0.0;
    row.mem_ratio = b.peak_bytes > 0 ? static_cast<double>(a.peak_bytes) / static_cast<double>(b.peak_bytes) : 0.0;
    row.logits_mem_ratio = b.logits_peak_bytes > 0 ? static_cast<double>(a.logits_peak_bytes) /
                                                         static_cast<double>(b.logits_peak_bytes)
                                                   : 0.0;
    out.push_back(std::move(row));
  }
  return out;
}

void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows) {
  os << kReportCsvHeader << '\n';
  for (const auto& r : rows)
    os << r.op << ',' << r.shape << ',' << r.speedup << ',' << r.mem_ratio << ',' << r.logits_mem_ratio << '\n';
}

}  // namespace fk::harness
