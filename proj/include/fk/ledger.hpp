#pragma once

// Explicit allocation accounting. Operators record the logical size of every
// buffer they create, so peak-memory claims become exact integer quantities
// instead of allocator-dependent measurements.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace fk {

enum class AllocKind { Alloc, Free };

// Well-known tags. kLogits marks the (rows x vocab) logits matrix itself.
namespace tags {
inline constexpr std::string_view kInput = "input";
inline constexpr std::string_view kOutput = "output";
inline constexpr std::string_view kResidual = "residual";
inline constexpr std::string_view kPartials = "partials";
inline constexpr std::string_view kGrad = "grad";
inline constexpr std::string_view kLogits = "logits";
inline constexpr std::string_view kProbs = "probs";
inline constexpr std::string_view kLogitsGrad = "logits_grad";
inline constexpr std::string_view kScratch = "scratch";
}  // namespace tags

struct LedgerEvent {
  std::string tag;
  std::uint64_t bytes;
  AllocKind kind;
  std::uint64_t current;  // after the event
  std::uint64_t peak;     // after the event
};

class AllocationLedger {
 public:
  // Throws UnbalancedFree when a Free has no outstanding Alloc of the same tag and size.
  void record(std::string_view tag, std::uint64_t bytes, AllocKind kind);

  std::uint64_t current_bytes() const noexcept { return current_; }
  std::uint64_t peak_bytes() const noexcept { return peak_; }

  // High-water mark of live bytes counting only events carrying `tag`.
  std::uint64_t peak_bytes(std::string_view tag) const;
  // Number of Alloc events carrying `tag`.
  std::size_t alloc_count(std::string_view tag) const;
  std::size_t alloc_count(std::string_view tag, std::uint64_t bytes) const;

  const std::vector<LedgerEvent>& events() const noexcept { return events_; }

  // Records a Free for every outstanding allocation (returned buffers going out of scope).
  void release_all();

  // "tag,bytes,kind,current,peak" per event.
  void write_csv(std::ostream& os) const;

 private:
  std::uint64_t current_ = 0;
  std::uint64_t peak_ = 0;
  std::vector<LedgerEvent> events_;
  std::map<std::pair<std::string, std::uint64_t>, std::uint64_t, std::less<>> outstanding_;
};

// Records Alloc on construction and Free on destruction. A null ledger is a no-op.
class LedgerScope {
 public:
  LedgerScope(AllocationLedger* ledger, std::string_view tag, std::uint64_t bytes)
      : ledger_(ledger), tag_(tag), bytes_(bytes) {
    if (ledger_) ledger_->record(tag_, bytes_, AllocKind::Alloc);
  }
  ~LedgerScope() {
    if (ledger_) ledger_->record(tag_, bytes_, AllocKind::Free);
  }
  LedgerScope(const LedgerScope&) = delete;
  LedgerScope& operator=(const LedgerScope&) = delete;

 private:
  AllocationLedger* ledger_;
  std::string tag_;
  std::uint64_t bytes_;
};

// Size of a B x T x V logits tensor at the given element width.
constexpr std::uint64_t logits_bytes(std::uint64_t batch, std::uint64_t seq, std::uint64_t vocab,
                                     std::uint64_t byte_width) {
  return batch * seq * vocab * byte_width;
}

}  // namespace fk
