#include "fk/ledger.hpp"

#include <algorithm>
#include <ostream>

#include "fk/error.hpp"

namespace fk {

void AllocationLedger::record(std::string_view tag, std::uint64_t bytes, AllocKind kind) {
  auto key = std::make_pair(std::string(tag), bytes);
  if (kind == AllocKind::Alloc) {
    ++outstanding_[key];
    current_ += bytes;
    peak_ = std::max(peak_, current_);
  } else {
    auto it = outstanding_.find(key);
    FK_CHECK(it != outstanding_.end() && it->second > 0, ErrorCode::UnbalancedFree,
             "free of " + std::to_string(bytes) + " bytes tagged '" + std::string(tag) +
                 "' without a matching allocation");
    if (--it->second == 0) outstanding_.erase(it);
    current_ -= bytes;
  }
  events_.push_back({std::move(key.first), bytes, kind, current_, peak_});
}

void AllocationLedger::release_all() {
  // Copy first: record() mutates outstanding_.
  const auto live = outstanding_;
  for (const auto& [key, count] : live)
    for (std::uint64_t c = 0; c < count; ++c) record(key.first, key.second, AllocKind::Free);
}

std::uint64_t AllocationLedger::peak_bytes(std::string_view tag) const {
  std::uint64_t live = 0;
  std::uint64_t peak = 0;
  for (const auto& e : events_) {
    if (e.tag != tag) continue;
    if (e.kind == AllocKind::Alloc) {
      live += e.bytes;
      peak = std::max(peak, live);
    } else {
      live -= e.bytes;
    }
  }
  return peak;
}

std::size_t AllocationLedger::alloc_count(std::string_view tag) const {
  return static_cast<std::size_t>(std::count_if(events_.begin(), events_.end(), [&](const LedgerEvent& e) {
    return e.kind == AllocKind::Alloc && e.tag == tag;
  }));
}

std::size_t AllocationLedger::alloc_count(std::string_view tag, std::uint64_t bytes) const {
  return static_cast<std::size_t>(std::count_if(events_.begin(), events_.end(), [&](const LedgerEvent& e) {
    return e.kind == AllocKind::Alloc && e.tag == tag && e.bytes == bytes;
  }));
}

void AllocationLedger::write_csv(std::ostream& os) const {
  os << "tag,bytes,kind,current,peak\n";
  for (const auto& e : events_) {
    os << e.tag << ',' << e.bytes << ',' << (e.kind == AllocKind::Alloc ? "alloc" : "free") << ','
       << e.current << ',' << e.peak << '\n';
  }
}

}  // namespace fk
