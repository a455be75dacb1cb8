#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hmtl/graph.hpp"
#include "hmtl/mesh.hpp"
#include "hmtl/model.hpp"

namespace hmtl {

struct ShardRange {
  uint64_t begin = 0, end = 0;  // [begin, end)
  uint64_t size() const { return end - begin; }
};

// balanced contiguous split; the first (count % n) shards get one extra
std::vector<ShardRange> balanced_split(uint64_t count, int n);

// Who owns which sample: per dataset, a serving group (all ranks in base
// mode, the dataset's sub-group in taskpar mode) and one contiguous range
// per serving rank.
struct DataPartition {
  struct Dataset {
    uint8_t dataset_id = 0;
    uint64_t count = 0;
    std::vector<int> serving_ranks;   // ascending world ranks
    std::vector<ShardRange> ranges;   // parallel to serving_ranks

    int owner_of(uint64_t index) const {
      for (size_t i = 0; i < ranges.size(); ++i)
        if (index >= ranges[i].begin && index < ranges[i].end)
          return serving_ranks[i];
      fail(ErrorCode::contract, "owner_of: index out of range");
    }
  };
  std::map<uint8_t, Dataset> datasets;
};

DataPartition make_partition(const std::map<uint8_t, uint64_t>& counts,
                             const Mesh& mesh, RunMode mode);

struct PlanItem {
  uint8_t dataset = 0;
  uint64_t index = 0;
  bool operator==(const PlanItem&) const = default;
};

// Per-epoch, per-rank ordered sample lists; batches of b_local per step.
// Epoch tails that do not fill a full effective batch are dropped so all
// ranks take the same number of steps.
struct EpochPlan {
  uint64_t seed = 0;
  int b_local = 0;
  int steps = 0;
  std::vector<std::vector<PlanItem>> per_rank;  // [world][steps * b_local]

  const PlanItem* batch_of(int rank, int step) const {
    return per_rank[rank].data() + size_t(step) * b_local;
  }
};

// Deterministic shuffle honoring the mode's routing constraints:
// base    - a seeded permutation of the full mixed index set dealt across all
//           ranks (the union over ranks is that permutation, truncated)
// taskpar - per head group g, a seeded permutation of dataset g only, dealt
//           across the group's replicas; steps = min over groups
EpochPlan shuffle_epoch(const std::map<uint8_t, uint64_t>& counts,
                        const Mesh& mesh, RunMode mode, uint64_t seed,
                        int b_local);

// DDStore-style distributed in-memory cache: each rank keeps its shard's raw
// record bytes; per-step batches are assembled by local slicing plus
// request/response reads served from the owners' memory. File reads happen
// only at load time.
class DataStore {
public:
  DataStore(const std::vector<std::string>& files, RankContext& ctx,
            RunMode mode, uint64_t memory_budget_bytes = ~0ull);
  ~DataStore();

  const DataPartition& partition() const { return partition_; }
  const std::map<uint8_t, uint64_t>& dataset_counts() const { return counts_; }

  EpochPlan make_epoch_plan(uint64_t seed, int b_local) const {
    return shuffle_epoch(counts_, ctx_.mesh, mode_, seed, b_local);
  }

  // this rank's step-th batch, in plan order, bit-identical to the stored
  // records; remote reads are coalesced per owner and tagged data_fetch
  std::vector<AtomisticSample> fetch_samples(const EpochPlan& plan, int step);

  // raw serialized bytes of a locally owned record
  std::vector<uint8_t> local_record_bytes(uint8_t dataset,
                                          uint64_t index) const;
  uint64_t shard_bytes() const;

private:
  std::vector<uint8_t> serve_(const std::vector<uint8_t>& request) const;

  struct Shard {
    ShardRange range;                 // sample indices held locally
    std::vector<uint8_t> bytes;       // raw records back-to-back
    std::vector<uint64_t> offsets;    // per local record, into bytes
  };

  RankContext& ctx_;
  RunMode mode_;
  std::map<uint8_t, uint64_t> counts_;
  DataPartition partition_;
  std::map<uint8_t, Shard> shards_;
  uint32_t next_request_id_ = 1;
};

}  // namespace hmtl
