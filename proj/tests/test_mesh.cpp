#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "hmtl/mesh.hpp"
#include "hmtl/rng.hpp"

using namespace hmtl;

namespace {

// Independent oracle: replay the documented schedule as an explicit message
// list and count per-slot payload bytes.
struct Msg {
  int from, to;
};
std::vector<Msg> schedule_messages(int size) {
  std::vector<Msg> ms;
  int P = 1;
  while (P < size) P <<= 1;
  for (int mask = P / 2; mask >= 1; mask >>= 1)     // reduce
    for (int s = mask; s < 2 * mask && s < size; ++s)
      ms.push_back({s, s - mask});
  for (int mask = 1; mask < size; mask <<= 1)       // broadcast
    for (int s = 0; s < mask; ++s)
      if (s + mask < size) ms.push_back({s, s + mask});
  return ms;
}

WorldConfig inproc_world(int n, int m) {
  WorldConfig cfg;
  cfg.mesh.n_groups = n;
  cfg.mesh.replicas = m;
  cfg.transport = WorldConfig::Transport::inproc;
  cfg.recv_timeout_ms = 60000;
  return cfg;
}

std::atomic<int> g_port_salt{0};

WorldConfig socket_world(int n, int m) {
  WorldConfig cfg = inproc_world(n, m);
  cfg.transport = WorldConfig::Transport::socket;
  cfg.base_port = 31000 + 16 * (g_port_salt.fetch_add(1) % 200);
  return cfg;
}

}  // namespace

TEST_CASE("row-major rank mapping") {
  Mesh mesh{5, 2};
  CHECK(mesh.world_size() == 10);
  CHECK(mesh.group_of(7) == 3);
  CHECK(mesh.slot_of(7) == 1);
  CHECK(mesh.rank_of(3, 1) == 7);
  auto g = head_group(mesh, 3);
  CHECK(g.members == std::vector<int>{6, 7});
  CHECK(g.slot_of(7) == 1);
  auto world = global_group(mesh);
  CHECK(world.size() == 10);
}

TEST_CASE("frame header codec round-trip") {
  Frame f;
  f.category = Category::data_fetch;
  f.source = 9;
  f.tag = make_tag(TagKind::request, 12345);
  f.payload.assign(17, 0xab);
  uint8_t hdr[kFrameHeaderBytes];
  encode_frame_header(f, hdr);
  Frame g;
  uint64_t len = decode_frame_header(hdr, &g);
  CHECK(len == 17);
  CHECK(g.category == Category::data_fetch);
  CHECK(g.source == 9);
  CHECK(g.tag == f.tag);
  CHECK(tag_kind(g.tag) == TagKind::request);

  hdr[0] ^= 0xff;
  CHECK_THROWS_AS((void)decode_frame_header(hdr, &g), Error);
}

TEST_CASE("single-rank world: collectives are identity") {
  run_world_inproc(inproc_world(1, 1), [](RankContext& ctx) {
    std::vector<double> buf = {4.5, -1.0};
    collective::allreduce_mean(*ctx.endpoint, ctx.global, buf.data(),
                               buf.size(), Category::encoder_sync);
    require(buf[0] == 4.5 && buf[1] == -1.0, "identity violated");
    collective::barrier(*ctx.endpoint, ctx.global);
    collective::broadcast(*ctx.endpoint, ctx.global, 0, buf.data(), 2,
                          Category::control);
    require(buf[0] == 4.5, "identity violated");
  });
}

TEST_CASE("allreduce_mean: 2 ranks [1,2] and [3,4] -> [2,3]") {
  run_world_inproc(inproc_world(1, 2), [](RankContext& ctx) {
    std::vector<double> buf = ctx.rank == 0 ? std::vector<double>{1, 2}
                                            : std::vector<double>{3, 4};
    collective::allreduce_mean(*ctx.endpoint, ctx.global, buf.data(), 2,
                               Category::encoder_sync);
    require(buf[0] == 2.0 && buf[1] == 3.0, "mean wrong");
  });
}

TEST_CASE("allreduce byte accounting matches hand-frozen schedule counts") {
  // 4 ranks, 1000 doubles: reduce sends once per non-root slot, broadcast
  // sends once from slots 0 (twice) and 1 (once)
  const uint64_t B = 8000;
  std::vector<uint64_t> sent(4), received(4);
  std::mutex mu;
  run_world_inproc(inproc_world(1, 4), [&](RankContext& ctx) {
    std::vector<double> buf(1000, double(ctx.rank));
    auto before = ctx.endpoint->stats_snapshot();
    collective::allreduce_mean(*ctx.endpoint, ctx.global, buf.data(),
                               buf.size(), Category::encoder_sync);
    auto after = ctx.endpoint->stats_snapshot().delta_since(before);
    std::lock_guard<std::mutex> lk(mu);
    sent[ctx.rank] = after.bytes_sent(Category::encoder_sync);
    received[ctx.rank] = after.bytes_received(Category::encoder_sync);
  });
  CHECK(sent[0] == 2 * B);  // bcast to slots 1 and 2
  CHECK(sent[1] == 2 * B);  // reduce to 0, bcast to 3
  CHECK(sent[2] == B);
  CHECK(sent[3] == B);

  // independent oracle replay
  auto ms = schedule_messages(4);
  std::vector<uint64_t> os(4, 0), orx(4, 0);
  for (auto& m : ms) {
    os[m.from] += B;
    orx[m.to] += B;
  }
  for (int r = 0; r < 4; ++r) {
    CHECK(sent[r] == os[r]);
    CHECK(received[r] == orx[r]);
  }

  // library prediction agrees too
  for (int r = 0; r < 4; ++r) {
    auto c = collective::allreduce_count(r, 4, B);
    CHECK(c.bytes_sent == sent[r]);
    CHECK(c.bytes_received == received[r]);
  }
}

TEST_CASE("schedule counts: oracle replay equals library for many sizes") {
  for (int size = 1; size <= 16; ++size) {
    auto ms = schedule_messages(size);
    std::vector<uint64_t> os(size, 0), orx(size, 0);
    for (auto& m : ms) {
      os[m.from] += 64;
      orx[m.to] += 64;
    }
    CHECK(int(ms.size()) == 2 * (size - 1));  // total messages closed form
    for (int s = 0; s < size; ++s) {
      auto c = collective::allreduce_count(s, size, 64);
      CHECK(c.bytes_sent == os[s]);
      CHECK(c.bytes_received == orx[s]);
    }
  }
}

TEST_CASE("mean correctness vs serial mean for groups up to 16") {
  for (int size : {2, 3, 5, 8, 13, 16}) {
    std::vector<std::vector<double>> inputs(size);
    Rng rng(100 + size);
    for (int r = 0; r < size; ++r) {
      inputs[r].resize(37);
      for (auto& v : inputs[r]) v = rng.uniform(-10, 10);
    }
    std::vector<double> want(37, 0.0);
    for (int r = 0; r < size; ++r)
      for (int i = 0; i < 37; ++i) want[i] += inputs[r][i];
    for (auto& v : want) v /= size;

    std::vector<std::vector<double>> got(size);
    std::mutex mu;
    run_world_inproc(inproc_world(1, size), [&](RankContext& ctx) {
      std::vector<double> buf = inputs[ctx.rank];
      collective::allreduce_mean(*ctx.endpoint, ctx.global, buf.data(),
                                 buf.size(), Category::encoder_sync);
      std::lock_guard<std::mutex> lk(mu);
      got[ctx.rank] = buf;
    });
    for (int r = 0; r < size; ++r)
      for (int i = 0; i < 37; ++i)
        CHECK(std::fabs(got[r][i] - want[i]) < 1e-12);
    // bit-identical across members (broadcast from one root)
    for (int r = 1; r < size; ++r)
      CHECK(std::memcmp(got[r].data(), got[0].data(), 37 * 8) == 0);
  }
}

TEST_CASE("determinism: same inputs give bit-identical allreduce results") {
  auto run_once = [](std::vector<double>* out) {
    std::mutex mu;
    run_world_inproc(inproc_world(2, 2), [&](RankContext& ctx) {
      Rng rng(7 + ctx.rank);
      std::vector<double> buf(129);
      for (auto& v : buf) v = rng.uniform(-1, 1);
      collective::allreduce_mean(*ctx.endpoint, ctx.global, buf.data(),
                                 buf.size(), Category::encoder_sync);
      if (ctx.rank == 0) {
        std::lock_guard<std::mutex> lk(mu);
        *out = buf;
      }
    });
  };
  std::vector<double> a, b;
  run_once(&a);
  run_once(&b);
  CHECK(std::memcmp(a.data(), b.data(), a.size() * 8) == 0);
}

TEST_CASE("broadcast from non-zero root and trivial cases") {
  run_world_inproc(inproc_world(1, 4), [](RankContext& ctx) {
    std::vector<double> buf(2);
    if (ctx.rank == 2) buf = {5, 6};
    collective::broadcast(*ctx.endpoint, ctx.global, 2, buf.data(), 2,
                          Category::control);
    require(buf[0] == 5 && buf[1] == 6, "broadcast wrong");
  });
}

TEST_CASE("tagged send/recv round trip preserves payload bit-exactly") {
  run_world_inproc(inproc_world(1, 2), [](RankContext& ctx) {
    Rng rng(55);
    std::vector<uint8_t> blob(4097);
    for (auto& b : blob) b = uint8_t(rng.uniform_int(256));
    if (ctx.rank == 0) {
      collective::send_tagged(*ctx.endpoint, 1, Category::control, 99,
                              blob.data(), blob.size());
      auto echo = collective::recv_tagged(*ctx.endpoint, 1, Category::control,
                                          100);
      require(echo == blob, "echo mismatch");
    } else {
      auto got = collective::recv_tagged(*ctx.endpoint, 0, Category::control,
                                         99);
      collective::send_tagged(*ctx.endpoint, 0, Category::control, 100,
                              got.data(), got.size());
    }
  });
}

TEST_CASE("accounting conservation: global sent == received per category") {
  std::vector<CommStats> stats(4);
  std::mutex mu;
  run_world_inproc(inproc_world(2, 2), [&](RankContext& ctx) {
    std::vector<double> buf(50, 1.0);
    collective::allreduce_mean(*ctx.endpoint, ctx.global, buf.data(), 50,
                               Category::encoder_sync);
    std::vector<double> hb(20, 2.0);
    collective::allreduce_mean(*ctx.endpoint, ctx.group, hb.data(), 20,
                               Category::head_sync);
    collective::barrier(*ctx.endpoint, ctx.global);
    std::lock_guard<std::mutex> lk(mu);
    stats[ctx.rank] = ctx.endpoint->stats_snapshot();
  });
  for (Category c : {Category::control, Category::encoder_sync,
                     Category::head_sync, Category::data_fetch}) {
    uint64_t s = 0, r = 0, ms = 0, mr = 0;
    for (auto& st : stats) {
      s += st.bytes_sent(c);
      r += st.bytes_received(c);
      ms += st.messages_sent(c);
      for (auto& p : st.received) mr += p[size_t(c)].messages;
    }
    CHECK(s == r);
    CHECK(ms == mr);
  }
}

TEST_CASE("head_sync traffic never crosses sub-group boundaries") {
  std::vector<CommStats> stats(6);
  std::mutex mu;
  Mesh mesh{3, 2};
  run_world_inproc(inproc_world(3, 2), [&](RankContext& ctx) {
    std::vector<double> hb(11, double(ctx.rank));
    collective::allreduce_mean(*ctx.endpoint, ctx.group, hb.data(), 11,
                               Category::head_sync);
    collective::barrier(*ctx.endpoint, ctx.global);
    std::lock_guard<std::mutex> lk(mu);
    stats[ctx.rank] = ctx.endpoint->stats_snapshot();
  });
  for (int r = 0; r < 6; ++r) {
    for (int peer = 0; peer < 6; ++peer) {
      if (mesh.group_of(peer) != mesh.group_of(r)) {
        CHECK(stats[r].sent[peer][size_t(Category::head_sync)].bytes == 0);
        CHECK(stats[r].received[peer][size_t(Category::head_sync)].bytes ==
              0);
      }
    }
  }
}

TEST_CASE("length mismatch in allreduce is detected") {
  CHECK_THROWS_AS(
      run_world_inproc(inproc_world(1, 2),
                       [](RankContext& ctx) {
                         size_t n = ctx.rank == 0 ? 4 : 5;
                         std::vector<double> buf(n, 1.0);
                         collective::allreduce_mean(
                             *ctx.endpoint, ctx.global, buf.data(), n,
                             Category::encoder_sync);
                       }),
      Error);
}

TEST_CASE("socket transport: 2x2 world over localhost") {
  auto cfg = socket_world(2, 2);
  auto dir = std::filesystem::temp_directory_path() / "hmtl_test_mesh";
  std::filesystem::create_directories(dir);
  auto out = (dir / "sock22.txt").string();
  std::filesystem::remove(out);

  run_world_forked(cfg, [&](RankContext& ctx) {
    // barrier on all 4 ranks, then an allreduce whose result is checked
    collective::barrier(*ctx.endpoint, ctx.global);
    std::vector<double> buf(257, double(ctx.rank + 1));
    collective::allreduce_mean(*ctx.endpoint, ctx.global, buf.data(),
                               buf.size(), Category::encoder_sync);
    require(buf[0] == 2.5, "socket allreduce mean wrong");
    std::vector<double> hb(3, double(ctx.rank));
    collective::allreduce_mean(*ctx.endpoint, ctx.group, hb.data(), 3,
                               Category::head_sync);
    // group 0: ranks {0,1} mean 0.5; group 1: ranks {2,3} mean 2.5
    double want = ctx.head() == 0 ? 0.5 : 2.5;
    require(hb[0] == want, "socket subgroup mean wrong");
    if (ctx.rank == 0) {
      std::ofstream f(out);
      f << "ok\n";
    }
  });
  std::ifstream f(out);
  std::string s;
  f >> s;
  CHECK(s == "ok");
}

TEST_CASE("socket transport: rank failure aborts the job") {
  auto cfg = socket_world(1, 2);
  CHECK_THROWS_AS(run_world_forked(cfg,
                                   [](RankContext& ctx) {
                                     if (ctx.rank == 1)
                                       fail(ErrorCode::internal, "boom");
                                     // rank 0 would block forever without
                                     // fail-fast EOF propagation
                                     auto b = ctx.endpoint->recv(
                                         1, Category::control,
                                         make_tag(TagKind::user, 7));
                                     (void)b;
                                   }),
                  Error);
}

TEST_CASE("request/response service answers while training context blocks") {
  run_world_inproc(inproc_world(1, 2), [](RankContext& ctx) {
    ctx.endpoint->set_request_handler(
        [&](int, uint32_t, const std::vector<uint8_t>& req) {
          std::vector<uint8_t> resp = req;
          for (auto& b : resp) b ^= 0xff;
          return resp;
        });
    collective::barrier(*ctx.endpoint, ctx.global);
    int peer = 1 - ctx.rank;
    std::vector<uint8_t> req = {1, 2, 3, uint8_t(ctx.rank)};
    uint32_t tag = make_tag(TagKind::request, 42 + ctx.rank);
    ctx.endpoint->send(peer, Category::data_fetch, tag, req.data(),
                       req.size());
    auto resp = ctx.endpoint->recv(
        peer, Category::data_fetch,
        make_tag(TagKind::response, (42 + ctx.rank) & 0x0fffffff));
    require(resp.size() == 4 && resp[0] == 0xfe, "service response wrong");
    collective::barrier(*ctx.endpoint, ctx.global);
  });
}
