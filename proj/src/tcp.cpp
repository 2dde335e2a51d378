#include "freescale/tcp.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <mutex>
#include <thread>

namespace freescale::comm {

namespace {

void put_u64_le(std::uint8_t* out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xff);
}

std::uint64_t get_u64_le(const std::uint8_t* in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return v;
}

bool read_exact(int fd, void* buf, std::size_t n) {
  auto* p = static_cast<std::uint8_t*>(buf);
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::read(fd, p + got, n - got);
    if (r <= 0) return false;
    got += static_cast<std::size_t>(r);
  }
  return true;
}

bool write_exact(int fd, const void* buf, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(buf);
  std::size_t sent = 0;
  while (sent < n) {
    ssize_t r = ::write(fd, p + sent, n - sent);
    if (r <= 0) return false;
    sent += static_cast<std::size_t>(r);
  }
  return true;
}

}  // namespace

struct TcpTransport::Impl {
  int rank = 0;
  int world = 0;
  int listen_fd = -1;

  std::mutex mu;
  std::condition_variable cv;
  std::map<std::pair<int, std::uint64_t>, std::deque<Bytes>> inbox;
  bool closed = false;

  std::vector<int> peer_fd;           // per rank; -1 for self
  std::vector<std::unique_ptr<std::mutex>> send_mu;
  std::vector<std::thread> readers;
  std::thread acceptor;

  void reader_loop(int src, int fd) {
    std::uint8_t header[16];
    while (true) {
      if (!read_exact(fd, header, 16)) break;
      const std::uint64_t len = get_u64_le(header);
      const std::uint64_t tag = get_u64_le(header + 8);
      Bytes payload(len);
      if (len > 0 && !read_exact(fd, payload.data(), len)) break;
      {
        std::lock_guard<std::mutex> lock(mu);
        inbox[{src, tag}].push_back(std::move(payload));
      }
      cv.notify_all();
    }
    {
      std::lock_guard<std::mutex> lock(mu);
      closed = true;
    }
    cv.notify_all();
  }
};

TcpTransport::TcpTransport(int rank,
                           const std::vector<std::pair<std::string, std::uint16_t>>& peers)
    : impl_(std::make_unique<Impl>()) {
  impl_->rank = rank;
  impl_->world = static_cast<int>(peers.size());
  impl_->peer_fd.assign(peers.size(), -1);
  for (std::size_t i = 0; i < peers.size(); ++i) {
    impl_->send_mu.push_back(std::make_unique<std::mutex>());
  }

  impl_->listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (impl_->listen_fd < 0) throw CollectiveError("tcp: cannot create listener socket");
  int one = 1;
  ::setsockopt(impl_->listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(peers[static_cast<std::size_t>(rank)].second);
  if (::bind(impl_->listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(impl_->listen_fd, impl_->world) != 0) {
    throw CollectiveError("tcp: cannot bind/listen on port " +
                          std::to_string(peers[static_cast<std::size_t>(rank)].second));
  }

  const int expected_inbound = rank;  // lower ranks dial us
  Impl* impl = impl_.get();
  impl->acceptor = std::thread([impl, expected_inbound] {
    for (int i = 0; i < expected_inbound; ++i) {
      int fd = ::accept(impl->listen_fd, nullptr, nullptr);
      if (fd < 0) return;
      int flag = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &flag, sizeof(flag));
      std::uint8_t hello[8];
      if (!read_exact(fd, hello, 8)) {
        ::close(fd);
        return;
      }
      const int src = static_cast<int>(get_u64_le(hello));
      // Distinct slot per src; the dialer only touches higher-rank slots.
      impl->peer_fd[static_cast<std::size_t>(src)] = fd;
    }
  });

  try {
    // Dial every higher rank, retrying while its listener comes up.
    for (int d = rank + 1; d < impl_->world; ++d) {
      int fd = -1;
      for (int attempt = 0; attempt < 400; ++attempt) {
        fd = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in peer{};
        peer.sin_family = AF_INET;
        ::inet_pton(AF_INET, peers[static_cast<std::size_t>(d)].first.c_str(), &peer.sin_addr);
        peer.sin_port = htons(peers[static_cast<std::size_t>(d)].second);
        if (::connect(fd, reinterpret_cast<sockaddr*>(&peer), sizeof(peer)) == 0) break;
        ::close(fd);
        fd = -1;
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
      }
      if (fd < 0) throw CollectiveError("tcp: cannot reach rank " + std::to_string(d));
      int flag = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &flag, sizeof(flag));
      std::uint8_t hello[8];
      put_u64_le(hello, static_cast<std::uint64_t>(rank));
      if (!write_exact(fd, hello, 8)) throw CollectiveError("tcp: handshake failed");
      impl_->peer_fd[static_cast<std::size_t>(d)] = fd;
    }
  } catch (...) {
    ::close(impl_->listen_fd);  // unblocks accept, acceptor exits
    impl_->listen_fd = -1;
    impl_->acceptor.join();
    throw;
  }
  impl_->acceptor.join();
  for (int s = 0; s < impl_->world; ++s) {
    if (s == rank) continue;
    const int fd = impl_->peer_fd[static_cast<std::size_t>(s)];
    if (fd < 0) throw CollectiveError("tcp: rank " + std::to_string(s) + " never connected");
    impl_->readers.emplace_back([impl, s, fd] { impl->reader_loop(s, fd); });
  }
}

TcpTransport::~TcpTransport() { shutdown(); }

void TcpTransport::shutdown() {
  if (!impl_) return;
  if (impl_->listen_fd >= 0) {
    ::close(impl_->listen_fd);
    impl_->listen_fd = -1;
  }
  for (auto& fd : impl_->peer_fd) {
    if (fd >= 0) {
      ::shutdown(fd, SHUT_RDWR);
      ::close(fd);
      fd = -1;
    }
  }
  for (auto& t : impl_->readers) {
    if (t.joinable()) t.join();
  }
  impl_->readers.clear();
}

int TcpTransport::rank() const { return impl_->rank; }
int TcpTransport::world_size() const { return impl_->world; }

void TcpTransport::send(int dst, std::uint64_t tag, Bytes payload, double /*send_time*/,
                        CostClass /*cost*/) {
  if (dst == impl_->rank) {
    std::lock_guard<std::mutex> lock(impl_->mu);
    impl_->inbox[{dst, tag}].push_back(std::move(payload));
    impl_->cv.notify_all();
    return;
  }
  const int fd = impl_->peer_fd.at(static_cast<std::size_t>(dst));
  std::uint8_t header[16];
  put_u64_le(header, payload.size());
  put_u64_le(header + 8, tag);
  std::lock_guard<std::mutex> lock(*impl_->send_mu[static_cast<std::size_t>(dst)]);
  if (!write_exact(fd, header, 16) ||
      (!payload.empty() && !write_exact(fd, payload.data(), payload.size()))) {
    throw CollectiveError("tcp: send to rank " + std::to_string(dst) + " failed");
  }
}

Delivery TcpTransport::recv(int src, std::uint64_t tag) {
  std::unique_lock<std::mutex> lock(impl_->mu);
  const auto key = std::make_pair(src, tag);
  impl_->cv.wait(lock, [&] {
    if (impl_->closed) return true;
    auto it = impl_->inbox.find(key);
    return it != impl_->inbox.end() && !it->second.empty();
  });
  auto it = impl_->inbox.find(key);
  if (it == impl_->inbox.end() || it->second.empty()) {
    throw CollectiveError("tcp: connection closed while waiting for rank " + std::to_string(src));
  }
  Delivery d;
  d.payload = std::move(it->second.front());
  it->second.pop_front();
  d.arrival = 0.0;
  return d;
}

std::vector<std::pair<std::string, std::uint16_t>> local_peer_table(int world_size,
                                                                    std::uint16_t base_port) {
  std::vector<std::pair<std::string, std::uint16_t>> peers;
  peers.reserve(static_cast<std::size_t>(world_size));
  for (int r = 0; r < world_size; ++r) {
    peers.emplace_back("127.0.0.1", static_cast<std::uint16_t>(base_port + r));
  }
  return peers;
}

}  // namespace freescale::comm
