#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "fk/harness/bench.hpp"

namespace fk::harness {

// One row per (op, shape, mode) that has both a fused and a reference record.
struct ReportRow {
  std::string op;
  std::string shape;  // "<rows>x<cols>"
  double speedup = 0.0;           // reference median / fused median
  double mem_ratio = 0.0;         // fused peak / reference peak
  double logits_mem_ratio = 0.0;  // same over logits-tagged bytes; 0 when neither side has any
};

inline constexpr const char* kReportCsvHeader = "op,shape,speedup,mem_ratio,logits_mem_ratio";

std::vector<ReportRow> aggregate(const std::vector<BenchRecord>& records);
void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows);

}  // namespace fk::harness
