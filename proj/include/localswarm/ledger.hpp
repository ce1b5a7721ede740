#pragma once
// Transfer and completion bookkeeping: the upload history of one run plus the
// peer -> ISP map needed to aggregate it offline.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace localswarm {

// Bytes that finished arriving at `time`, uploaded by src_peer to dst_peer.
// Aborted transfers may emit a final partial record so that per-piece byte
// sums stay exact.
struct TransferRecord {
  double time = 0.0;
  int src_peer = 0;
  int dst_peer = 0;
  std::uint64_t bytes = 0;
};

// One finished download, with the inputs the slowdown metric needs.
struct CompletionRecord {
  int peer = 0;
  double arrival = 0.0;
  double completion = 0.0;
  double max_upload = 0.0;  // bytes/s
};

class TransferLedger {
 public:
  TransferLedger() = default;
  explicit TransferLedger(std::vector<int> peer_isp) : peer_isp_(std::move(peer_isp)) {}

  void set_peer_isp(std::vector<int> map) { peer_isp_ = std::move(map); }

  // Run end. Window accounting covers [0, end_time] even when the tail of the
  // run produced no transfers.
  void set_end_time(double t) { end_ = t; }

  void add(double time, int src_peer, int dst_peer, std::uint64_t bytes) {
    if (bytes == 0) throw std::invalid_argument("ledger: zero-byte record");
    if (src_peer == dst_peer) throw std::invalid_argument("ledger: self-transfer record");
    records_.push_back({time, src_peer, dst_peer, bytes});
    if (time > end_) end_ = time;
  }

  const std::vector<TransferRecord>& records() const { return records_; }
  const std::vector<int>& peer_isp() const { return peer_isp_; }
  std::size_t size() const { return records_.size(); }
  double end_time() const { return end_; }

  int isp_of(int peer) const {
    if (peer < 0 || static_cast<std::size_t>(peer) >= peer_isp_.size())
      throw std::invalid_argument("ledger: peer without ISP mapping");
    return peer_isp_[static_cast<std::size_t>(peer)];
  }

  int n_isps() const {
    int top = -1;
    for (int isp : peer_isp_) top = std::max(top, isp);
    return top + 1;
  }

  // Stable text form, sorted by (time, src, dst): the determinism fixture for
  // whole-run comparisons.
  std::string canonical() const {
    std::vector<TransferRecord> sorted = records_;
    std::sort(sorted.begin(), sorted.end(), [](const TransferRecord& a, const TransferRecord& b) {
      if (a.time != b.time) return a.time < b.time;
      if (a.src_peer != b.src_peer) return a.src_peer < b.src_peer;
      return a.dst_peer < b.dst_peer;
    });
    std::string out;
    char buf[128];
    for (const TransferRecord& r : sorted) {
      std::snprintf(buf, sizeof(buf), "%.6f %d %d %llu\n", r.time, r.src_peer, r.dst_peer,
                    static_cast<unsigned long long>(r.bytes));
      out += buf;
    }
    return out;
  }

 private:
  std::vector<TransferRecord> records_;
  std::vector<int> peer_isp_;
  double end_ = 0.0;
};

}  // namespace localswarm
