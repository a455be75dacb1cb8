#include "hmtl/mesh.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstring>
#include <iostream>

namespace hmtl {

const char* category_name(Category c) {
  switch (c) {
    case Category::control: return "control";
    case Category::encoder_sync: return "encoder_sync";
    case Category::head_sync: return "head_sync";
    case Category::data_fetch: return "data_fetch";
  }
  return "?";
}

// ---- frame codec ----

namespace {
void put_u16(uint8_t* p, uint16_t x) {
  p[0] = uint8_t(x);
  p[1] = uint8_t(x >> 8);
}
void put_u32(uint8_t* p, uint32_t x) {
  for (int i = 0; i < 4; ++i) p[i] = uint8_t(x >> (8 * i));
}
void put_u64(uint8_t* p, uint64_t x) {
  for (int i = 0; i < 8; ++i) p[i] = uint8_t(x >> (8 * i));
}
uint16_t get_u16(const uint8_t* p) {
  return uint16_t(p[0] | (uint16_t(p[1]) << 8));
}
uint32_t get_u32(const uint8_t* p) {
  uint32_t x = 0;
  for (int i = 0; i < 4; ++i) x |= uint32_t(p[i]) << (8 * i);
  return x;
}
uint64_t get_u64(const uint8_t* p) {
  uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= uint64_t(p[i]) << (8 * i);
  return x;
}
}  // namespace

void encode_frame_header(const Frame& f, uint8_t out[kFrameHeaderBytes]) {
  put_u32(out, kFrameMagic);
  put_u16(out + 4, kFrameVersion);
  put_u16(out + 6, static_cast<uint16_t>(f.category));
  put_u32(out + 8, f.source);
  put_u32(out + 12, f.tag);
  put_u64(out + 16, f.payload.size());
}

uint64_t decode_frame_header(const uint8_t in[kFrameHeaderBytes], Frame* f) {
  require(get_u32(in) == kFrameMagic, "frame: bad magic", ErrorCode::comm);
  require(get_u16(in + 4) == kFrameVersion, "frame: bad version",
          ErrorCode::comm);
  uint16_t cat = get_u16(in + 6);
  require(cat < kNumCategories, "frame: bad category", ErrorCode::comm);
  f->category = static_cast<Category>(cat);
  f->source = get_u32(in + 8);
  f->tag = get_u32(in + 12);
  return get_u64(in + 16);
}

CommStats CommStats::delta_since(const CommStats& base) const {
  CommStats d(static_cast<int>(sent.size()));
  for (size_t p = 0; p < sent.size(); ++p) {
    for (int c = 0; c < kNumCategories; ++c) {
      d.sent[p][c].bytes = sent[p][c].bytes - base.sent[p][c].bytes;
      d.sent[p][c].messages = sent[p][c].messages - base.sent[p][c].messages;
      d.received[p][c].bytes =
          received[p][c].bytes - base.received[p][c].bytes;
      d.received[p][c].messages =
          received[p][c].messages - base.received[p][c].messages;
    }
  }
  return d;
}

// ---- endpoint ----

Endpoint::Endpoint(int rank, int world)
    : rank_(rank), world_(world), stats_(world) {}

Endpoint::~Endpoint() = default;

void Endpoint::count_sent(int dst, Category cat, size_t len) {
  std::lock_guard<std::mutex> lk(mu_);
  auto& e = stats_.sent[dst][size_t(cat)];
  e.bytes += len;
  e.messages += 1;
}

void Endpoint::route(Frame&& f) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    auto& e = stats_.received[f.source][size_t(f.category)];
    e.bytes += f.payload.size();
    e.messages += 1;
  }
  if (tag_kind(f.tag) == TagKind::request) {
    std::lock_guard<std::mutex> lk(req_mu_);
    req_queue_.push_back(std::move(f));
    req_cv_.notify_one();
    return;
  }
  std::lock_guard<std::mutex> lk(mu_);
  mail_[Key{int(f.source), uint16_t(f.category), f.tag}].push_back(
      std::move(f.payload));
  cv_.notify_all();
}

std::vector<uint8_t> Endpoint::recv(int src, Category cat, uint32_t tag) {
  std::unique_lock<std::mutex> lk(mu_);
  const Key key{src, uint16_t(cat), tag};
  auto deadline = std::chrono::steady_clock::now() +
                  std::chrono::milliseconds(recv_timeout_ms_);
  for (;;) {
    if (failed_)
      fail(ErrorCode::comm, "rank " + std::to_string(rank_) +
                                ": world aborted: " + fail_reason_);
    auto it = mail_.find(key);
    if (it != mail_.end() && !it->second.empty()) {
      std::vector<uint8_t> payload = std::move(it->second.front());
      it->second.pop_front();
      if (it->second.empty()) mail_.erase(it);
      return payload;
    }
    if (cv_.wait_until(lk, deadline) == std::cv_status::timeout)
      fail(ErrorCode::comm,
           "rank " + std::to_string(rank_) + ": receive timeout (src=" +
               std::to_string(src) + " cat=" + category_name(cat) +
               " tag=" + std::to_string(tag) + ")");
  }
}

uint32_t Endpoint::next_collective_tag(uint32_t group_key) {
  std::lock_guard<std::mutex> lk(mu_);
  uint32_t seq = coll_seq_[group_key]++;
  return collective_tag(group_key, seq);
}

CommStats Endpoint::stats_snapshot() const {
  std::lock_guard<std::mutex> lk(mu_);
  return stats_;
}

void Endpoint::abort(const std::string& why) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (!failed_) {
      failed_ = true;
      fail_reason_ = why;
    }
    cv_.notify_all();
  }
  req_cv_.notify_all();
}

void Endpoint::set_request_handler(RequestHandler h) {
  std::lock_guard<std::mutex> lk(req_mu_);
  handler_ = std::move(h);
}

void Endpoint::start_service_() {
  service_thread_ = std::thread([this] { service_loop_(); });
}

void Endpoint::stop_service_() {
  {
    std::lock_guard<std::mutex> lk(req_mu_);
    service_stop_ = true;
    req_cv_.notify_all();
  }
  if (service_thread_.joinable()) service_thread_.join();
}

void Endpoint::service_loop_() {
  for (;;) {
    Frame f;
    {
      std::unique_lock<std::mutex> lk(req_mu_);
      req_cv_.wait(lk, [this] { return service_stop_ || !req_queue_.empty(); });
      if (req_queue_.empty()) {
        if (service_stop_) return;
        continue;
      }
      f = std::move(req_queue_.front());
      req_queue_.pop_front();
    }
    RequestHandler h;
    {
      std::lock_guard<std::mutex> lk(req_mu_);
      h = handler_;
    }
    std::vector<uint8_t> resp;
    if (h) {
      try {
        resp = h(int(f.source), f.tag, f.payload);
      } catch (const std::exception& e) {
        abort(std::string("request handler failed: ") + e.what());
        return;
      }
    }
    uint32_t resp_tag = make_tag(TagKind::response, f.tag & 0x0fffffffu);
    try {
      send(int(f.source), f.category, resp_tag, resp.data(), resp.size());
    } catch (const std::exception& e) {
      abort(std::string("response send failed: ") + e.what());
      return;
    }
  }
}

// ---- in-process transport ----

namespace {

class InprocHub;

class InprocEndpoint : public Endpoint {
public:
  InprocEndpoint(int rank, int world, InprocHub* hub)
      : Endpoint(rank, world), hub_(hub) {
    start_service_();
  }
  ~InprocEndpoint() override { stop_service_(); }

  void send(int dst, Category cat, uint32_t tag, const uint8_t* data,
            size_t len) override;

  void deliver(Frame&& f) { route(std::move(f)); }
  using Endpoint::abort;

private:
  InprocHub* hub_;
};

class InprocHub {
public:
  explicit InprocHub(int world) : eps_(world) {}
  std::vector<std::unique_ptr<InprocEndpoint>> eps_;

  void abort_all(const std::string& why) {
    for (auto& e : eps_)
      if (e) e->abort(why);
  }
};

void InprocEndpoint::send(int dst, Category cat, uint32_t tag,
                          const uint8_t* data, size_t len) {
  require(dst >= 0 && dst < world_, "send: bad destination rank",
          ErrorCode::comm);
  count_sent(dst, cat, len);
  Frame f;
  f.category = cat;
  f.source = uint32_t(rank_);
  f.tag = tag;
  f.payload.assign(data, data + len);
  hub_->eps_[dst]->deliver(std::move(f));
}

}  // namespace

void run_world_inproc(const WorldConfig& cfg, const RankBody& body) {
  const int world = cfg.mesh.world_size();
  require(world >= 1, "world must have at least one rank");
  InprocHub hub(world);
  for (int r = 0; r < world; ++r) {
    hub.eps_[r] = std::make_unique<InprocEndpoint>(r, world, &hub);
    hub.eps_[r]->set_recv_timeout_ms(cfg.recv_timeout_ms);
  }

  std::vector<std::thread> threads;
  std::mutex err_mu;
  std::exception_ptr first_error;
  for (int r = 0; r < world; ++r) {
    threads.emplace_back([&, r] {
      RankContext ctx;
      ctx.rank = r;
      ctx.mesh = cfg.mesh;
      ctx.global = global_group(cfg.mesh);
      ctx.group = head_group(cfg.mesh, cfg.mesh.group_of(r));
      ctx.endpoint = hub.eps_[r].get();
      try {
        body(ctx);
      } catch (...) {
        {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
        hub.abort_all("rank " + std::to_string(r) + " failed");
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---- socket transport ----

namespace {

void write_all(int fd, const uint8_t* p, size_t n) {
  while (n > 0) {
    ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
    if (k < 0) {
      if (errno == EINTR) continue;
      fail(ErrorCode::comm,
           std::string("socket write failed: ") + std::strerror(errno));
    }
    p += k;
    n -= size_t(k);
  }
}

bool read_all(int fd, uint8_t* p, size_t n) {
  while (n > 0) {
    ssize_t k = ::recv(fd, p, n, 0);
    if (k == 0) return false;  // peer closed
    if (k < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += k;
    n -= size_t(k);
  }
  return true;
}

class SocketEndpoint : public Endpoint {
public:
  SocketEndpoint(int rank, int world) : Endpoint(rank, world) {
    fds_.assign(world, -1);
    write_mu_ = std::vector<std::mutex>(world);
  }

  ~SocketEndpoint() override {
    stop_service_();
    close_all();
    for (auto& t : readers_)
      if (t.joinable()) t.join();
  }

  void connect_world(const WorldConfig& cfg) {
    using clock = std::chrono::steady_clock;
    const auto deadline =
        clock::now() + std::chrono::milliseconds(cfg.rendezvous_timeout_ms);
    const int world = world_;

    int lfd = ::socket(AF_INET, SOCK_STREAM, 0);
    require(lfd >= 0, "socket() failed", ErrorCode::comm);
    int one = 1;
    ::setsockopt(lfd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(uint16_t(cfg.base_port + rank_));
    require(::bind(lfd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0,
            "bind failed on port " + std::to_string(cfg.base_port + rank_) +
                ": " + std::strerror(errno),
            ErrorCode::comm);
    require(::listen(lfd, world) == 0, "listen failed", ErrorCode::comm);

    // connect to lower ranks, accept from higher ranks
    std::thread acceptor([&] {
      for (int expected = world - 1 - rank_; expected > 0; --expected) {
        pollfd pfd{lfd, POLLIN, 0};
        auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                        deadline - clock::now())
                        .count();
        if (left <= 0 || ::poll(&pfd, 1, int(left)) <= 0) return;
        int fd = ::accept(lfd, nullptr, nullptr);
        if (fd < 0) return;
        uint8_t hello[4];
        if (!read_all(fd, hello, 4)) {
          ::close(fd);
          return;
        }
        uint32_t peer = get_u32(hello);
        if (peer >= uint32_t(world)) {
          ::close(fd);
          return;
        }
        int flag = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &flag, sizeof flag);
        fds_[peer] = fd;
      }
    });

    bool ok = true;
    for (int peer = 0; peer < rank_ && ok; ++peer) {
      const std::string host =
          peer < int(cfg.hosts.size()) ? cfg.hosts[peer] : "127.0.0.1";
      for (;;) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        require(fd >= 0, "socket() failed", ErrorCode::comm);
        sockaddr_in peer_addr{};
        peer_addr.sin_family = AF_INET;
        peer_addr.sin_port = htons(uint16_t(cfg.base_port + peer));
        require(::inet_pton(AF_INET, host.c_str(), &peer_addr.sin_addr) == 1,
                "bad host: " + host, ErrorCode::comm);
        if (::connect(fd, reinterpret_cast<sockaddr*>(&peer_addr),
                      sizeof peer_addr) == 0) {
          int flag = 1;
          ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &flag, sizeof flag);
          uint8_t hello[4];
          put_u32(hello, uint32_t(rank_));
          write_all(fd, hello, 4);
          fds_[peer] = fd;
          break;
        }
        ::close(fd);
        if (clock::now() > deadline) {
          ok = false;
          break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      }
    }
    acceptor.join();
    ::close(lfd);
    require(ok, "rendezvous timeout connecting to peers", ErrorCode::comm);
    for (int p = 0; p < world; ++p)
      require(p == rank_ || fds_[p] >= 0,
              "rendezvous incomplete: missing peer " + std::to_string(p),
              ErrorCode::comm);

    for (int p = 0; p < world; ++p) {
      if (p == rank_) continue;
      readers_.emplace_back([this, p] { reader_loop_(p); });
    }
    start_service_();
  }

  void send(int dst, Category cat, uint32_t tag, const uint8_t* data,
            size_t len) override {
    require(dst >= 0 && dst < world_ && dst != rank_,
            "send: bad destination rank", ErrorCode::comm);
    uint8_t hdr[kFrameHeaderBytes];
    put_u32(hdr, kFrameMagic);
    put_u16(hdr + 4, kFrameVersion);
    put_u16(hdr + 6, static_cast<uint16_t>(cat));
    put_u32(hdr + 8, uint32_t(rank_));
    put_u32(hdr + 12, tag);
    put_u64(hdr + 16, len);
    {
      std::lock_guard<std::mutex> lk(write_mu_[dst]);
      write_all(fds_[dst], hdr, sizeof hdr);
      if (len > 0) write_all(fds_[dst], data, len);
    }
    count_sent(dst, cat, len);
  }

  void begin_shutdown() { shutting_down_.store(true); }

  void close_all() {
    for (int& fd : fds_) {
      if (fd >= 0) {
        ::shutdown(fd, SHUT_RDWR);
        ::close(fd);
        fd = -1;
      }
    }
  }

private:
  void reader_loop_(int peer) {
    const int fd = fds_[peer];
    for (;;) {
      uint8_t hdr[kFrameHeaderBytes];
      if (!read_all(fd, hdr, sizeof hdr)) break;
      Frame f;
      uint64_t len = 0;
      try {
        len = decode_frame_header(hdr, &f);
      } catch (const std::exception& e) {
        abort(e.what());
        return;
      }
      f.payload.resize(len);
      if (len > 0 && !read_all(fd, f.payload.data(), len)) break;
      route(std::move(f));
    }
    if (!shutting_down_.load())
      abort("peer " + std::to_string(peer) + " disconnected");
  }

  std::vector<int> fds_;
  std::vector<std::mutex> write_mu_;
  std::vector<std::thread> readers_;
  std::atomic<bool> shutting_down_{false};
};

}  // namespace

void run_rank_socket(const WorldConfig& cfg, int rank, const RankBody& body) {
  const int world = cfg.mesh.world_size();
  require(rank >= 0 && rank < world, "bad rank");
  SocketEndpoint ep(rank, world);
  ep.set_recv_timeout_ms(cfg.recv_timeout_ms);
  ep.connect_world(cfg);

  RankContext ctx;
  ctx.rank = rank;
  ctx.mesh = cfg.mesh;
  ctx.global = global_group(cfg.mesh);
  ctx.group = head_group(cfg.mesh, cfg.mesh.group_of(rank));
  ctx.endpoint = &ep;

  // rendezvous barrier: everyone is wired up before user traffic starts
  collective::barrier(ep, ctx.global);
  body(ctx);
  // peers may close right after the final barrier; EOF is expected past here
  ep.begin_shutdown();
  collective::barrier(ep, ctx.global);
}

void run_world_forked(const WorldConfig& cfg, const RankBody& body) {
  const int world = cfg.mesh.world_size();
  std::vector<pid_t> pids;
  std::cout.flush();
  std::cerr.flush();
  for (int r = 0; r < world; ++r) {
    pid_t pid = ::fork();
    require(pid >= 0, "fork failed", ErrorCode::comm);
    if (pid == 0) {
      int code = 0;
      try {
        run_rank_socket(cfg, r, body);
      } catch (const std::exception& e) {
        std::cerr << "[rank " << r << "] " << e.what() << "\n";
        std::cerr.flush();
        code = 1;
      }
      std::cout.flush();
      ::_exit(code);
    }
    pids.push_back(pid);
  }
  bool failed = false;
  for (size_t i = 0; i < pids.size(); ++i) {
    int status = 0;
    ::waitpid(pids[i], &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed = true;
  }
  require(!failed, "one or more ranks failed; job aborted", ErrorCode::comm);
}

void run_world(const WorldConfig& cfg, const RankBody& body) {
  if (cfg.transport == WorldConfig::Transport::socket)
    run_world_forked(cfg, body);
  else
    run_world_inproc(cfg, body);
}

// ---- collectives ----

namespace collective {

namespace {
int pow2_ceil(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}
}  // namespace

ScheduleCount reduce_count(int slot, int size, uint64_t payload) {
  ScheduleCount c;
  for (int mask = pow2_ceil(size) / 2; mask >= 1; mask >>= 1) {
    if (slot >= mask && slot < 2 * mask) {
      c.bytes_sent += payload;
      c.msgs_sent += 1;
    } else if (slot < mask && slot + mask < size) {
      c.bytes_received += payload;
      c.msgs_received += 1;
    }
  }
  return c;
}

ScheduleCount bcast_count(int slot, int size, uint64_t payload) {
  ScheduleCount c;
  for (int mask = 1; mask < size; mask <<= 1) {
    if (slot < mask) {
      if (slot + mask < size) {
        c.bytes_sent += payload;
        c.msgs_sent += 1;
      }
    } else if (slot < 2 * mask) {
      c.bytes_received += payload;
      c.msgs_received += 1;
    }
  }
  return c;
}

ScheduleCount allreduce_count(int slot, int size, uint64_t payload) {
  ScheduleCount r = reduce_count(slot, size, payload);
  ScheduleCount b = bcast_count(slot, size, payload);
  r.bytes_sent += b.bytes_sent;
  r.bytes_received += b.bytes_received;
  r.msgs_sent += b.msgs_sent;
  r.msgs_received += b.msgs_received;
  return r;
}

namespace detail {

void tree_reduce_bytes(Endpoint& ep, const RankGroup& g, uint8_t* buf,
                       size_t bytes, Category cat, uint32_t tag,
                       void (*add)(uint8_t*, const uint8_t*, size_t)) {
  const int size = g.size();
  const int slot = g.slot_of(ep.rank());
  for (int mask = pow2_ceil(size) / 2; mask >= 1; mask >>= 1) {
    if (slot >= mask && slot < 2 * mask) {
      ep.send(g.members[slot - mask], cat, tag, buf, bytes);
    } else if (slot < mask && slot + mask < size) {
      std::vector<uint8_t> in = ep.recv(g.members[slot + mask], cat, tag);
      require(in.size() == bytes, "allreduce: buffer length mismatch",
              ErrorCode::comm);
      add(buf, in.data(), bytes);
    }
  }
}

void tree_bcast_bytes(Endpoint& ep, const RankGroup& g, int root_slot,
                      uint8_t* buf, size_t bytes, Category cat,
                      uint32_t tag) {
  const int size = g.size();
  const int slot = g.slot_of(ep.rank());
  const int rel = (slot - root_slot + size) % size;
  auto world_of = [&](int r) { return g.members[(r + root_slot) % size]; };
  for (int mask = 1; mask < size; mask <<= 1) {
    if (rel < mask) {
      if (rel + mask < size)
        ep.send(world_of(rel + mask), cat, tag, buf, bytes);
    } else if (rel < 2 * mask) {
      std::vector<uint8_t> in = ep.recv(world_of(rel - mask), cat, tag);
      require(in.size() == bytes, "broadcast: buffer length mismatch",
              ErrorCode::comm);
      std::memcpy(buf, in.data(), bytes);
    }
  }
}

}  // namespace detail

void barrier(Endpoint& ep, const RankGroup& g) {
  uint32_t tag = ep.next_collective_tag(g.key);
  uint8_t dummy = 0;
  auto noop = [](uint8_t*, const uint8_t*, size_t) {};
  detail::tree_reduce_bytes(ep, g, &dummy, 0, Category::control, tag,
                            static_cast<void (*)(uint8_t*, const uint8_t*,
                                                 size_t)>(noop));
  detail::tree_bcast_bytes(ep, g, 0, &dummy, 0, Category::control, tag);
}

void send_tagged(Endpoint& ep, int dst, Category cat, uint32_t user_tag,
                 const uint8_t* data, size_t len) {
  ep.send(dst, cat, make_tag(TagKind::user, user_tag), data, len);
}

std::vector<uint8_t> recv_tagged(Endpoint& ep, int src, Category cat,
                                 uint32_t user_tag) {
  return ep.recv(src, cat, make_tag(TagKind::user, user_tag));
}

}  // namespace collective

}  // namespace hmtl
