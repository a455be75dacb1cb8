#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "hmtl/error.hpp"

namespace hmtl {

// ---- process mesh ----

// N head sub-groups of M replicas each, row-major (group-major) rank layout:
// rank r -> (group r / M, slot r % M).
struct Mesh {
  int n_groups = 1;   // N, one per dataset/head in taskpar mode
  int replicas = 1;   // M

  int world_size() const { return n_groups * replicas; }
  int group_of(int rank) const { return rank / replicas; }
  int slot_of(int rank) const { return rank % replicas; }
  int rank_of(int group, int slot) const { return group * replicas + slot; }
};

struct RankGroup {
  uint32_t key = 0;          // 0 = global, 1 + g = head sub-group g
  std::vector<int> members;  // ascending world ranks

  int size() const { return static_cast<int>(members.size()); }
  int slot_of(int world_rank) const {
    for (int i = 0; i < size(); ++i)
      if (members[i] == world_rank) return i;
    fail(ErrorCode::contract, "rank not a member of this group");
  }
};

inline RankGroup global_group(const Mesh& mesh) {
  RankGroup g;
  g.key = 0;
  for (int r = 0; r < mesh.world_size(); ++r) g.members.push_back(r);
  return g;
}

inline RankGroup head_group(const Mesh& mesh, int group) {
  RankGroup g;
  g.key = 1 + static_cast<uint32_t>(group);
  for (int s = 0; s < mesh.replicas; ++s)
    g.members.push_back(mesh.rank_of(group, s));
  return g;
}

// ---- wire format ----
// little-endian frames: u32 magic, u16 version, u16 category tag,
// u32 source rank, u32 message tag, u64 payload length, payload

enum class Category : uint16_t {
  control = 0,
  encoder_sync = 1,
  head_sync = 2,
  data_fetch = 3,
};
constexpr int kNumCategories = 4;
const char* category_name(Category c);

constexpr uint32_t kFrameMagic = 0x46544d48;  // "HMTF"
constexpr uint16_t kFrameVersion = 1;
constexpr size_t kFrameHeaderBytes = 24;

// message tag: top 4 bits = kind, low 28 bits = kind-specific
enum class TagKind : uint32_t { collective = 1, request = 2, response = 3, user = 4 };
inline uint32_t make_tag(TagKind kind, uint32_t sub) {
  return (static_cast<uint32_t>(kind) << 28) | (sub & 0x0fffffffu);
}
inline TagKind tag_kind(uint32_t tag) {
  return static_cast<TagKind>(tag >> 28);
}
inline uint32_t collective_tag(uint32_t group_key, uint32_t seq) {
  return make_tag(TagKind::collective, (group_key << 20) | (seq & 0xfffffu));
}

struct Frame {
  Category category = Category::control;
  uint32_t source = 0;
  uint32_t tag = 0;
  std::vector<uint8_t> payload;
};

void encode_frame_header(const Frame& f, uint8_t out[kFrameHeaderBytes]);
// parses and validates a header; returns payload length
uint64_t decode_frame_header(const uint8_t in[kFrameHeaderBytes], Frame* f);

// ---- per-rank traffic counters ----

struct CommStats {
  struct Entry {
    uint64_t bytes = 0;
    uint64_t messages = 0;
  };
  // [category][peer] payload accounting
  std::vector<std::array<Entry, kNumCategories>> sent, received;

  explicit CommStats(int world = 0) { resize(world); }
  void resize(int world) {
    sent.assign(world, {});
    received.assign(world, {});
  }
  uint64_t bytes_sent(Category c) const {
    uint64_t n = 0;
    for (const auto& p : sent) n += p[size_t(c)].bytes;
    return n;
  }
  uint64_t bytes_received(Category c) const {
    uint64_t n = 0;
    for (const auto& p : received) n += p[size_t(c)].bytes;
    return n;
  }
  uint64_t messages_sent(Category c) const {
    uint64_t n = 0;
    for (const auto& p : sent) n += p[size_t(c)].messages;
    return n;
  }
  CommStats delta_since(const CommStats& base) const;
};

// ---- rank endpoint ----

using RequestHandler = std::function<std::vector<uint8_t>(
    int source, uint32_t tag, const std::vector<uint8_t>& payload)>;

// One per rank: sends frames to peers, routes incoming frames either to the
// request-service context (request frames) or to tag-matched mailboxes that
// the training context blocks on.
class Endpoint {
public:
  virtual ~Endpoint();

  int rank() const { return rank_; }
  int world_size() const { return world_; }

  virtual void send(int dst, Category cat, uint32_t tag,
                    const uint8_t* data, size_t len) = 0;

  // blocking receive of an exact (src, category, tag) match
  std::vector<uint8_t> recv(int src, Category cat, uint32_t tag);

  // the transport-service context: answers request frames, never touches
  // training state
  void set_request_handler(RequestHandler h);

  // next collective sequence tag for a group (call order is identical on all
  // members, so tags line up without negotiation)
  uint32_t next_collective_tag(uint32_t group_key);

  CommStats stats_snapshot() const;
  void set_recv_timeout_ms(int ms) { recv_timeout_ms_ = ms; }

  void abort(const std::string& why);

protected:
  Endpoint(int rank, int world);

  void route(Frame&& f);          // called by transport readers
  void count_sent(int dst, Category cat, size_t len);
  void service_loop_();
  void start_service_();
  void stop_service_();

  int rank_, world_;
  int recv_timeout_ms_ = 300000;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  struct Key {
    int src;
    uint16_t cat;
    uint32_t tag;
    bool operator<(const Key& o) const {
      if (src != o.src) return src < o.src;
      if (cat != o.cat) return cat < o.cat;
      return tag < o.tag;
    }
  };
  std::map<Key, std::deque<std::vector<uint8_t>>> mail_;
  std::map<uint32_t, uint32_t> coll_seq_;
  bool failed_ = false;
  std::string fail_reason_;

  CommStats stats_;

  // request service
  std::mutex req_mu_;
  std::condition_variable req_cv_;
  std::deque<Frame> req_queue_;
  RequestHandler handler_;
  std::thread service_thread_;
  bool service_stop_ = false;
};

// ---- worlds ----

struct WorldConfig {
  Mesh mesh;
  enum class Transport { inproc, socket } transport = Transport::inproc;
  int base_port = 29500;
  std::vector<std::string> hosts;  // per-rank listener host; default loopback
  int rendezvous_timeout_ms = 30000;
  int recv_timeout_ms = 300000;
};

// Per-rank execution context handed to the rank body.
struct RankContext {
  int rank = 0;
  Mesh mesh;
  RankGroup global;
  RankGroup group;  // this rank's head sub-group
  Endpoint* endpoint = nullptr;

  int head() const { return mesh.group_of(rank); }
  int slot() const { return mesh.slot_of(rank); }
};

using RankBody = std::function<void(RankContext&)>;

// Runs all ranks as threads of this process over an in-memory transport.
// The first rank exception aborts the whole world and is rethrown.
void run_world_inproc(const WorldConfig& cfg, const RankBody& body);

// Joins a socket world as one rank (listener on base_port + rank, full peer
// connectivity, rendezvous barrier). Returns after body completes and the
// world has quiesced.
void run_rank_socket(const WorldConfig& cfg, int rank, const RankBody& body);

// Forks world_size child processes, each running run_rank_socket. Fail-fast:
// the first failed child aborts the job.
void run_world_forked(const WorldConfig& cfg, const RankBody& body);

// Dispatches on cfg.transport: inproc threads or forked socket ranks.
void run_world(const WorldConfig& cfg, const RankBody& body);

// ---- collectives: binomial tree with a fixed, documented schedule ----
//
// reduce (descending masks, P = smallest power of two >= size):
//   for mask = P/2 .. 1:
//     slots in [mask, 2*mask) send their accumulator to slot - mask, once;
//     slots < mask with slot + mask < size receive and add (buf += recv)
// root (slot 0) divides by group size, then
// broadcast (ascending masks):
//   for mask = 1; mask < size; mask <<= 1:
//     slots < mask send to slot + mask when that exists;
//     slots in [mask, 2*mask) receive
// Every reduction is therefore a fixed binary tree: results are bit-identical
// across runs and across group members.

namespace collective {

struct ScheduleCount {
  uint64_t bytes_sent = 0, bytes_received = 0;
  uint32_t msgs_sent = 0, msgs_received = 0;
};

// payload accounting of the documented schedule, per slot
ScheduleCount reduce_count(int slot, int size, uint64_t payload_bytes);
ScheduleCount bcast_count(int slot, int size, uint64_t payload_bytes);
ScheduleCount allreduce_count(int slot, int size, uint64_t payload_bytes);

void barrier(Endpoint& ep, const RankGroup& g);

template <typename S>
void allreduce_mean(Endpoint& ep, const RankGroup& g, S* buf, size_t n,
                    Category cat);

template <typename S>
void allreduce_sum(Endpoint& ep, const RankGroup& g, S* buf, size_t n,
                   Category cat);

template <typename S>
void broadcast(Endpoint& ep, const RankGroup& g, int root_slot, S* buf,
               size_t n, Category cat);

// point-to-point, tagged with a user tag
void send_tagged(Endpoint& ep, int dst, Category cat, uint32_t user_tag,
                 const uint8_t* data, size_t len);
std::vector<uint8_t> recv_tagged(Endpoint& ep, int src, Category cat,
                                 uint32_t user_tag);

// ---- template implementation ----

namespace detail {
void tree_reduce_bytes(Endpoint& ep, const RankGroup& g, uint8_t* buf,
                       size_t bytes, Category cat, uint32_t tag,
                       void (*add)(uint8_t*, const uint8_t*, size_t));
void tree_bcast_bytes(Endpoint& ep, const RankGroup& g, int root_slot,
                      uint8_t* buf, size_t bytes, Category cat, uint32_t tag);

template <typename S>
void add_elems(uint8_t* dst, const uint8_t* src, size_t bytes) {
  S* d = reinterpret_cast<S*>(dst);
  const S* s = reinterpret_cast<const S*>(src);
  const size_t n = bytes / sizeof(S);
  for (size_t i = 0; i < n; ++i) d[i] += s[i];
}
}  // namespace detail

template <typename S>
void allreduce_sum(Endpoint& ep, const RankGroup& g, S* buf, size_t n,
                   Category cat) {
  uint32_t tag = ep.next_collective_tag(g.key);
  detail::tree_reduce_bytes(ep, g, reinterpret_cast<uint8_t*>(buf),
                            n * sizeof(S), cat, tag, &detail::add_elems<S>);
  detail::tree_bcast_bytes(ep, g, 0, reinterpret_cast<uint8_t*>(buf),
                           n * sizeof(S), cat, tag);
}

template <typename S>
void allreduce_mean(Endpoint& ep, const RankGroup& g, S* buf, size_t n,
                    Category cat) {
  uint32_t tag = ep.next_collective_tag(g.key);
  detail::tree_reduce_bytes(ep, g, reinterpret_cast<uint8_t*>(buf),
                            n * sizeof(S), cat, tag, &detail::add_elems<S>);
  if (g.slot_of(ep.rank()) == 0) {
    const S inv = S(1) / static_cast<S>(g.size());
    for (size_t i = 0; i < n; ++i) buf[i] *= inv;
  }
  detail::tree_bcast_bytes(ep, g, 0, reinterpret_cast<uint8_t*>(buf),
                           n * sizeof(S), cat, tag);
}

template <typename S>
void broadcast(Endpoint& ep, const RankGroup& g, int root_slot, S* buf,
               size_t n, Category cat) {
  uint32_t tag = ep.next_collective_tag(g.key);
  detail::tree_bcast_bytes(ep, g, root_slot, reinterpret_cast<uint8_t*>(buf),
                           n * sizeof(S), cat, tag);
}

}  // namespace collective

}  // namespace hmtl
