#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "freescale/comm.hpp"

namespace freescale::comm {

/// One rank endpoint speaking length-prefixed frames over TCP:
/// 8-byte little-endian payload length, 8-byte tag, payload.
/// Logical timing does not travel on the wire; deliveries arrive at time 0,
/// so TCP mode gives correctness and per-link FIFO only.
class TcpTransport : public Transport {
 public:
  /// peers[r] = (host, port) of rank r's listener. Binds the local listener,
  /// then builds the full mesh (accepting lower ranks, dialing higher ones,
  /// retrying while peers come up).
  TcpTransport(int rank, const std::vector<std::pair<std::string, std::uint16_t>>& peers);
  ~TcpTransport() override;

  int rank() const override;
  int world_size() const override;
  void send(int dst, std::uint64_t tag, Bytes payload, double send_time, CostClass cost) override;
  Delivery recv(int src, std::uint64_t tag) override;

  void shutdown();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Loopback peer table for hosting several rank endpoints in one process.
std::vector<std::pair<std::string, std::uint16_t>> local_peer_table(int world_size,
                                                                    std::uint16_t base_port);

}  // namespace freescale::comm
