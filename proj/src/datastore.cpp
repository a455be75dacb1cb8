#include "hmtl/datastore.hpp"

#include <algorithm>
#include <cstring>

#include "hmtl/rng.hpp"
#include "hmtl/sample_io.hpp"

namespace hmtl {

std::vector<ShardRange> balanced_split(uint64_t count, int n) {
  require(n >= 1, "balanced_split: need at least one shard");
  std::vector<ShardRange> out(n);
  uint64_t base = count / uint64_t(n);
  uint64_t extra = count % uint64_t(n);
  uint64_t at = 0;
  for (int i = 0; i < n; ++i) {
    uint64_t len = base + (uint64_t(i) < extra ? 1 : 0);
    out[i] = {at, at + len};
    at += len;
  }
  return out;
}

DataPartition make_partition(const std::map<uint8_t, uint64_t>& counts,
                             const Mesh& mesh, RunMode mode) {
  DataPartition p;
  for (const auto& [id, count] : counts) {
    DataPartition::Dataset d;
    d.dataset_id = id;
    d.count = count;
    if (mode == RunMode::taskpar) {
      require(id < mesh.n_groups,
              "taskpar: dataset id " + std::to_string(id) +
                  " has no head sub-group (mesh has " +
                  std::to_string(mesh.n_groups) + ")");
      d.serving_ranks = head_group(mesh, id).members;
    } else {
      d.serving_ranks = global_group(mesh).members;
    }
    d.ranges = balanced_split(count, int(d.serving_ranks.size()));
    p.datasets[id] = std::move(d);
  }
  return p;
}

EpochPlan shuffle_epoch(const std::map<uint8_t, uint64_t>& counts,
                        const Mesh& mesh, RunMode mode, uint64_t seed,
                        int b_local) {
  require(b_local >= 1, "b_local must be >= 1");
  const int world = mesh.world_size();
  EpochPlan plan;
  plan.seed = seed;
  plan.b_local = b_local;
  plan.per_rank.assign(world, {});

  if (mode == RunMode::taskpar) {
    int steps = -1;
    for (const auto& [id, count] : counts) {
      require(id < mesh.n_groups, "taskpar: dataset id without sub-group");
      int g_steps =
          int(count / (uint64_t(mesh.replicas) * uint64_t(b_local)));
      steps = steps < 0 ? g_steps : std::min(steps, g_steps);
    }
    plan.steps = std::max(steps, 0);
    for (const auto& [id, count] : counts) {
      std::vector<uint64_t> idx(count);
      for (uint64_t i = 0; i < count; ++i) idx[i] = i;
      Rng rng(seed_stream(seed, 0x700 + id));
      rng.shuffle(idx);
      for (int s = 0; s < plan.steps; ++s) {
        for (int slot = 0; slot < mesh.replicas; ++slot) {
          int rank = mesh.rank_of(id, slot);
          uint64_t at = (uint64_t(s) * mesh.replicas + slot) * b_local;
          for (int b = 0; b < b_local; ++b)
            plan.per_rank[rank].push_back(PlanItem{id, idx[at + b]});
        }
      }
    }
    return plan;
  }

  // base/serial: one permutation of the full mixed index set
  std::vector<PlanItem> all;
  for (const auto& [id, count] : counts)
    for (uint64_t i = 0; i < count; ++i) all.push_back(PlanItem{id, i});
  Rng rng(seed_stream(seed, 0x77));
  rng.shuffle(all);
  plan.steps = int(all.size() / (uint64_t(world) * uint64_t(b_local)));
  for (int s = 0; s < plan.steps; ++s)
    for (int r = 0; r < world; ++r) {
      uint64_t at = (uint64_t(s) * world + r) * b_local;
      for (int b = 0; b < b_local; ++b)
        plan.per_rank[r].push_back(all[at + b]);
    }
  return plan;
}

DataStore::DataStore(const std::vector<std::string>& files, RankContext& ctx,
                     RunMode mode, uint64_t memory_budget_bytes)
    : ctx_(ctx), mode_(mode) {
  // headers first: the partition must be known before deciding what to keep
  std::vector<io::FileHeader> headers;
  for (const auto& f : files) {
    io::FileHeader h = io::read_sample_header(f);
    require(counts_.count(h.dataset_id) == 0,
            "duplicate dataset id across files", ErrorCode::data);
    counts_[h.dataset_id] = h.count;
    headers.push_back(h);
  }
  partition_ = make_partition(counts_, ctx.mesh, mode);

  for (size_t fi = 0; fi < files.size(); ++fi) {
    const uint8_t id = headers[fi].dataset_id;
    const auto& d = partition_.datasets.at(id);
    auto it = std::find(d.serving_ranks.begin(), d.serving_ranks.end(),
                        ctx.rank);
    if (it == d.serving_ranks.end()) continue;  // not serving this dataset
    const ShardRange range = d.ranges[it - d.serving_ranks.begin()];

    io::RawFile raw = io::read_sample_file_raw(files[fi]);
    require(raw.header.count == headers[fi].count, "file changed during load",
            ErrorCode::io);
    Shard shard;
    shard.range = range;
    const uint64_t lo = raw.offsets[range.begin];
    const uint64_t hi = raw.offsets[range.end];
    require(hi - lo <= memory_budget_bytes,
            "shard exceeds the configured memory budget", ErrorCode::data);
    shard.bytes.assign(raw.records.begin() + lo, raw.records.begin() + hi);
    for (uint64_t i = range.begin; i <= range.end; ++i)
      shard.offsets.push_back(raw.offsets[i] - lo);
    // validate every owned record once (CRC) while still at load time
    size_t off = 0;
    for (uint64_t i = range.begin; i < range.end; ++i)
      (void)io::parse_record(shard.bytes.data(), shard.bytes.size(), &off == nullptr ? off : off);
    shards_[id] = std::move(shard);
  }

  uint64_t total = 0;
  for (const auto& [id, s] : shards_) total += s.bytes.size();
  require(total <= memory_budget_bytes,
          "combined shards exceed the configured memory budget",
          ErrorCode::data);

  ctx_.endpoint->set_request_handler(
      [this](int, uint32_t, const std::vector<uint8_t>& req) {
        return serve_(req);
      });
}

DataStore::~DataStore() { ctx_.endpoint->set_request_handler(nullptr); }

uint64_t DataStore::shard_bytes() const {
  uint64_t total = 0;
  for (const auto& [id, s] : shards_) total += s.bytes.size();
  return total;
}

std::vector<uint8_t> DataStore::local_record_bytes(uint8_t dataset,
                                                   uint64_t index) const {
  auto it = shards_.find(dataset);
  require(it != shards_.end(), "record not served by this rank");
  const Shard& s = it->second;
  require(index >= s.range.begin && index < s.range.end,
          "record index outside the local shard");
  uint64_t li = index - s.range.begin;
  return std::vector<uint8_t>(s.bytes.begin() + s.offsets[li],
                              s.bytes.begin() + s.offsets[li + 1]);
}

// request payload: u32 count, then per item u8 dataset + u64 index (LE);
// response: the raw records back-to-back, in request order
std::vector<uint8_t> DataStore::serve_(
    const std::vector<uint8_t>& req) const {
  require(req.size() >= 4, "fetch request too short", ErrorCode::comm);
  uint32_t n = 0;
  std::memcpy(&n, req.data(), 4);
  require(req.size() == 4 + size_t(n) * 9, "fetch request malformed",
          ErrorCode::comm);
  std::vector<uint8_t> out;
  for (uint32_t i = 0; i < n; ++i) {
    const uint8_t* p = req.data() + 4 + i * 9;
    uint8_t dataset = p[0];
    uint64_t index = 0;
    std::memcpy(&index, p + 1, 8);
    std::vector<uint8_t> rec = local_record_bytes(dataset, index);
    out.insert(out.end(), rec.begin(), rec.end());
  }
  return out;
}

std::vector<AtomisticSample> DataStore::fetch_samples(const EpochPlan& plan,
                                                      int step) {
  require(step >= 0 && step < plan.steps, "fetch: step outside epoch");
  const PlanItem* items = plan.batch_of(ctx_.rank, step);
  const int B = plan.b_local;

  // split local vs remote, coalescing remote reads per owner
  std::map<int, std::vector<int>> by_owner;  // owner -> positions in batch
  for (int b = 0; b < B; ++b) {
    int owner = partition_.datasets.at(items[b].dataset).owner_of(
        items[b].index);
    if (owner != ctx_.rank) by_owner[owner].push_back(b);
  }

  // issue all requests first; responses may arrive in any order
  std::map<int, uint32_t> req_tags;
  for (const auto& [owner, positions] : by_owner) {
    std::vector<uint8_t> req(4 + positions.size() * 9);
    uint32_t n = uint32_t(positions.size());
    std::memcpy(req.data(), &n, 4);
    for (size_t i = 0; i < positions.size(); ++i) {
      const PlanItem& it = items[positions[i]];
      uint8_t* p = req.data() + 4 + i * 9;
      p[0] = it.dataset;
      std::memcpy(p + 1, &it.index, 8);
    }
    uint32_t id = next_request_id_++ & 0x0fffffffu;
    req_tags[owner] = id;
    ctx_.endpoint->send(owner, Category::data_fetch,
                        make_tag(TagKind::request, id), req.data(),
                        req.size());
  }

  std::vector<AtomisticSample> out(B);
  for (int b = 0; b < B; ++b) {
    int owner = partition_.datasets.at(items[b].dataset).owner_of(
        items[b].index);
    if (owner == ctx_.rank) {
      std::vector<uint8_t> rec =
          local_record_bytes(items[b].dataset, items[b].index);
      size_t off = 0;
      out[b] = io::parse_record(rec.data(), rec.size(), off);
    }
  }
  for (const auto& [owner, positions] : by_owner) {
    std::vector<uint8_t> resp = ctx_.endpoint->recv(
        owner, Category::data_fetch,
        make_tag(TagKind::response, req_tags[owner]));
    size_t off = 0;
    for (int pos : positions)
      out[pos] = io::parse_record(resp.data(), resp.size(), off);
    require(off == resp.size(), "fetch response length mismatch",
            ErrorCode::comm);
  }
  return out;
}

}  // namespace hmtl
