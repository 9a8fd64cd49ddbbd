#pragma once

#include "gateway/meter.hpp"

#include <memory>
#include <vector>

namespace gateway {

/// ICMP echo sweep. Uses an unprivileged ICMP datagram socket where the kernel allows it,
/// otherwise a raw socket; probe() returns nullopt when neither can be opened.
class IcmpProber final : public Prober {
public:
    explicit IcmpProber(Millis timeout = Millis{800}) : timeout_(timeout) {}
    std::optional<std::set<Ipv4Address>> probe(const std::vector<Ipv4Address>& candidates) override;

    /// True if this process can open an ICMP socket of either kind.
    static bool available();

private:
    Millis timeout_;
};

/// Connect-based reachability: a host is up if a TCP connect to any of `ports` either
/// completes or is actively refused.
class TcpProber final : public Prober {
public:
    explicit TcpProber(std::vector<std::uint16_t> ports = {80, 443, 22, 53, 62078}, Millis timeout = Millis{800})
        : ports_(std::move(ports)), timeout_(timeout) {}
    std::optional<std::set<Ipv4Address>> probe(const std::vector<Ipv4Address>& candidates) override;

private:
    std::vector<std::uint16_t> ports_;
    Millis timeout_;
};

/// ICMP when available, TCP reachability otherwise.
std::unique_ptr<Prober> make_default_prober();

} // namespace gateway
