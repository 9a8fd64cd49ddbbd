#pragma once

#include "gateway/common.hpp"
#include "gateway/net.hpp"

#include <atomic>
#include <condition_variable>
#include <map>
#include <mutex>
#include <thread>

#include <nlohmann/json_fwd.hpp>

namespace gateway {

/// Jain's index (Σx)² / (n·Σx²). n = 1 gives 1.0; empty or all-zero input has no value.
/// Throws std::invalid_argument on negative entries.
std::optional<double> compute_jfi(std::span<const double> values);

/// Shared pacing budget: every transfer reserves its slot in arrival order, so concurrent
/// users of one link get interleaved service and the sum never exceeds the rate.
class SharedLinkBudget {
public:
    explicit SharedLinkBudget(double bits_per_second, Millis burst = Millis{5});

    /// Blocks until `bytes` may pass.
    void acquire(std::size_t bytes);

    double rate_bps() const { return rate_bytes_ * 8.0; }
    std::uint64_t bytes_consumed() const { return consumed_.load(); }

private:
    using SteadyTime = std::chrono::steady_clock::time_point;

    const double rate_bytes_;
    const std::chrono::nanoseconds burst_;
    std::mutex mu_;
    SteadyTime next_free_{};
    std::atomic<std::uint64_t> consumed_{0};
};

/// Loopback forwarder with an aggregate rate cap. The upstream side of each forwarded
/// connection is bound to the accepting peer's address so the far end sees the real client.
class RateLimitedLink {
public:
    RateLimitedLink(double bits_per_second, Endpoint upstream, std::size_t chunk = 8 * 1024);
    ~RateLimitedLink();

    RateLimitedLink(const RateLimitedLink&) = delete;
    RateLimitedLink& operator=(const RateLimitedLink&) = delete;

    Endpoint endpoint() const { return {Ipv4Address{127, 0, 0, 1}, port_}; }
    const SharedLinkBudget& budget() const { return budget_; }
    void stop();

private:
    void accept_loop();
    void serve(int client_fd);

    SharedLinkBudget budget_;
    Endpoint upstream_;
    std::size_t chunk_;
    Socket listener_;
    std::uint16_t port_ = 0;
    std::atomic<bool> stopping_{false};
    std::thread acceptor_;
    std::mutex mu_;
    std::vector<std::thread> workers_;
    std::vector<int> open_fds_;
};

/// Byte source/sink for load tests. First byte of a connection selects the mode:
/// 'D' streams until the client sends 'S', then closes; 'U' sinks until EOF and answers with
/// the 8-byte big-endian count received; 'P' echoes every byte.
class TestOrigin {
public:
    TestOrigin();
    ~TestOrigin();

    TestOrigin(const TestOrigin&) = delete;
    TestOrigin& operator=(const TestOrigin&) = delete;

    Endpoint endpoint() const { return {Ipv4Address{127, 0, 0, 1}, port_}; }
    std::size_t connections_served() const { return served_.load(); }
    void stop();

private:
    void accept_loop();
    void serve(int fd);

    Socket listener_;
    std::uint16_t port_ = 0;
    std::atomic<bool> stopping_{false};
    std::atomic<std::size_t> served_{0};
    std::thread acceptor_;
    std::mutex mu_;
    std::vector<std::thread> workers_;
    std::vector<int> open_fds_;
};

struct LoadTestPlan {
    int client_count = 1;
    Millis duration_down{30'000};
    Millis duration_up{30'000};
    ProxyProtocol protocol = ProxyProtocol::http_connect;
    std::optional<double> link_rate_limit; ///< bits/second
    int repetitions = 1;
    Millis ping_interval{200};
    std::optional<Credentials> credentials;
    /// Client k connects from 127.0.0.(first_source_octet + k).
    int first_source_octet = 10;

    /// Empty when valid.
    std::string validation_error() const;
};

struct ClientResult {
    Ipv4Address source;
    double throughput_down = 0; ///< bits/second
    double throughput_up = 0;
    std::vector<double> latencies_ms;
    /// Payload bytes this client exchanged over all of its tunnels in the repetition.
    std::uint64_t bytes_up = 0;
    std::uint64_t bytes_down = 0;
};

struct RepetitionResult {
    std::vector<ClientResult> clients;
    double aggregate_down = 0;
    double aggregate_up = 0;
    std::optional<double> jfi_down;
    std::optional<double> jfi_up;
    double latency_mean_ms = 0;
    double latency_stddev_ms = 0;
    double start_skew_ms = 0; ///< spread of the clients' download start instants
};

struct MeanStd {
    double mean = 0;
    double stddev = 0;
};

MeanStd mean_stddev(std::span<const double> values);

struct LoadTestReport {
    LoadTestPlan plan;
    std::vector<RepetitionResult> repetitions;
    MeanStd aggregate_down;
    MeanStd aggregate_up;
    MeanStd jfi_down;
    MeanStd jfi_up;
    MeanStd latency_ms;
    std::vector<std::string> diagnostics; ///< aborted repetitions

    nlohmann::json to_json() const;
    /// Aligned table: clients, down/up Mbit/s, latency, JFI.
    std::string to_table() const;
};

class LoadTestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Runs the plan against a proxy (nullopt: connect straight to the origin, for baselines).
/// Only http_connect and socks5 are supported: the payload exchange needs a raw tunnel.
/// A repetition whose client fails is discarded and noted; throws LoadTestError if all fail.
LoadTestReport run_load_test(const LoadTestPlan& plan, std::optional<Endpoint> proxy, Endpoint origin);

/// Opens a tunnel to `target` through `proxy` from `source`. Throws LoadTestError.
Socket open_tunnel(const Endpoint& connect_to, ProxyProtocol protocol, const Endpoint& target,
                   std::optional<Ipv4Address> source, const std::optional<Credentials>& credentials,
                   Millis timeout = Millis{10'000});

} // namespace gateway
