#pragma once

#include "gateway/manager.hpp"
#include "gateway/meter.hpp"
#include "gateway/net.hpp"
#include "gateway/vpn.hpp"

#include <atomic>
#include <condition_variable>
#include <map>
#include <mutex>
#include <thread>

namespace gateway {

/// True when no auth is configured, otherwise a constant-time match of both fields.
bool authenticate(const std::optional<Credentials>& presented, const std::optional<Credentials>& configured);

class DialError : public std::runtime_error {
public:
    enum class Kind { resolve, bind, refused, unreachable, timeout, other };

    DialError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

/// Opens upstream connections. Swappable so tests can observe (or forbid) dialing.
class Dialer {
public:
    virtual ~Dialer() = default;
    /// Throws DialError.
    virtual Socket dial(const TargetAddress& target, Millis timeout) = 0;
};

/// Resolves via the system resolver (IPv4) and binds the local side to the egress first.
class EgressDialer final : public Dialer {
public:
    explicit EgressDialer(EgressBinding binding) : binding_(std::move(binding)) {}
    Socket dial(const TargetAddress& target, Millis timeout) override;

    void set_binding(EgressBinding binding);
    EgressBinding binding() const;

private:
    mutable std::mutex mu_;
    EgressBinding binding_;
};

/// IPv4 literal or first A record. Throws DialError(resolve).
Ipv4Address resolve_ipv4(const std::string& host);

struct ProxySettings {
    std::optional<Credentials> auth;
    Millis connect_timeout{10'000};
    Millis idle_timeout{60'000};
    Millis handshake_timeout{10'000};
    std::size_t relay_buffer = 64 * 1024;
};

struct RelayOptions {
    Millis idle_timeout{60'000};
    std::size_t buffer_size = 64 * 1024;
    /// Move bytes with splice(2) through a pipe instead of a userspace buffer when available.
    bool zero_copy = true;
};

/// Copies both directions concurrently until both have ended, a side errors, the session is
/// terminated, or nothing moves for `idle_timeout`. Counts every write through the meter,
/// then finalizes. `pending_up` is client data already read past the handshake.
SessionRecord relay(int client_fd, int upstream_fd, const SessionHandle& session, TrafficMeter& meter,
                    const RelayOptions& options, std::string_view pending_up = {});

/// HTTP (forward + CONNECT) and SOCKS5 listeners. One thread per client connection.
class ProxyServer {
public:
    struct Connection; ///< fds of one client connection, for forced shutdown

    ProxyServer(ProxySettings settings, TrafficMeter& meter, TrafficManager& manager, Dialer& dialer,
                const Clock& clock = system_clock());
    ~ProxyServer();

    ProxyServer(const ProxyServer&) = delete;
    ProxyServer& operator=(const ProxyServer&) = delete;

    /// Binds both listeners (port 0 = ephemeral) and starts accepting. Throws BindError.
    void start(Ipv4Address listen_address, std::uint16_t http_port, std::uint16_t socks_port);
    /// Stops accepting, waits up to `drain` for connections to end, then closes the rest.
    void stop(Millis drain = Millis{5000});

    std::uint16_t http_port() const { return http_port_; }
    std::uint16_t socks_port() const { return socks_port_; }
    std::size_t active_connections() const;

    /// Blocking per-connection handlers, exposed for socketpair-driven tests.
    /// Return the session record when a session was opened.
    std::optional<SessionRecord> handle_http(Socket client, Ipv4Address client_ip);
    std::optional<SessionRecord> handle_socks5(Socket client, Ipv4Address client_ip);

private:
    enum class Kind { http, socks };

    void accept_loop(int listen_fd, Kind kind);
    void reap_finished();
    std::shared_ptr<Connection> track();
    void untrack(std::uint64_t id);

    std::optional<SessionRecord> http_connect(Socket& client, Ipv4Address ip, const std::string& authority,
                                              std::string leftover, const std::shared_ptr<Connection>& conn);
    template <class Reader>
    std::optional<SessionRecord> http_forward(Socket& client, Ipv4Address ip, std::string first_head, Reader& reader,
                                              const std::shared_ptr<Connection>& conn);
    SessionHandle record_denied(Ipv4Address ip, ProxyProtocol protocol, std::optional<TargetAddress> target,
                                AdmissionDecision verdict);

    ProxySettings settings_;
    TrafficMeter& meter_;
    TrafficManager& manager_;
    Dialer& dialer_;
    const Clock& clock_;

    Socket http_listener_;
    Socket socks_listener_;
    std::uint16_t http_port_ = 0;
    std::uint16_t socks_port_ = 0;
    int wake_fd_ = -1;
    std::atomic<bool> stopping_{false};
    std::thread http_thread_;
    std::thread socks_thread_;

    mutable std::mutex conn_mu_;
    std::condition_variable conn_cv_;
    std::uint64_t next_conn_id_ = 1;
    std::map<std::uint64_t, std::shared_ptr<Connection>> connections_;
    std::map<std::uint64_t, std::thread> threads_;
    std::vector<std::uint64_t> finished_;
};

} // namespace gateway
