#pragma once

#include "gateway/common.hpp"
#include "gateway/events.hpp"
#include "gateway/records.hpp"
#include "gateway/store.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <shared_mutex>

namespace gateway {

class TrafficMeter;

/// Live handle for one proxied connection. Counter reads are lock-free and never torn.
class Session {
public:
    const std::string& id() const { return base_.session_id; }
    Ipv4Address client_ip() const { return base_.client_ip; }
    ProxyProtocol protocol() const { return base_.protocol; }
    const std::optional<TargetAddress>& target() const { return base_.target; }
    const AdmissionDecision& verdict() const { return base_.verdict; }
    Timestamp started_at() const { return base_.started_at; }

    std::uint64_t bytes_up() const { return up_.load(std::memory_order_relaxed); }
    std::uint64_t bytes_down() const { return down_.load(std::memory_order_relaxed); }
    bool finalized() const { return finalized_.load(std::memory_order_acquire); }

    /// Installs the action that closes this session's sockets (used by disconnect).
    void set_terminator(std::function<void()> fn);
    /// Runs the terminator at most once. Returns false if none was installed.
    bool terminate();
    bool terminated() const;

private:
    friend class TrafficMeter;
    explicit Session(SessionRecord base) : base_(std::move(base)) {}

    SessionRecord base_;
    std::atomic<std::uint64_t> up_{0};
    std::atomic<std::uint64_t> down_{0};
    std::atomic<bool> finalized_{false};
    SessionRecord final_record_; // valid once finalized_

    mutable std::mutex term_mu_;
    std::function<void()> terminator_;
    bool terminated_ = false;
};

using SessionHandle = std::shared_ptr<Session>;

/// Reachability sweep strategy. nullopt means the probe itself failed (e.g. no socket).
class Prober {
public:
    virtual ~Prober() = default;
    virtual std::optional<std::set<Ipv4Address>> probe(const std::vector<Ipv4Address>& candidates) = 0;
};

/// Receives meter state changes. Calls happen outside the meter's locks.
class MeterObserver {
public:
    virtual ~MeterObserver() = default;
    virtual void on_client_online(const ClientRecord&) {}
    virtual void on_client_offline(const ClientRecord&) {}
    virtual void on_transfer(Ipv4Address, Direction, std::uint64_t, Timestamp) {}
    virtual void on_session_finalized(const SessionRecord&) {}
};

class ClientRejected : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// record_transfer on a finalized session: a relay/finalize ordering bug.
class SessionFinalizedError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct MeterOptions {
    Cidr subnet{Ipv4Address{192, 168, 43, 0}, 24};
    bool allow_loopback = false;
    Millis probe_interval{10'000};
};

struct ClientStats {
    std::uint64_t bytes_up = 0;
    std::uint64_t bytes_down = 0;
    std::uint64_t session_count = 0;
    std::uint64_t live_sessions = 0;

    friend bool operator==(const ClientStats&, const ClientStats&) = default;
};

struct TimeRange {
    Timestamp from{};
    Timestamp to{};
};

struct MeterTotals {
    std::uint64_t bytes_up = 0;
    std::uint64_t bytes_down = 0;
};

struct ClientSnapshot {
    ClientRecord record;
    ClientStats stats;
};

struct MeterSnapshot {
    Timestamp at{};
    std::vector<ClientSnapshot> clients;
    MeterTotals totals;
    std::size_t live_sessions = 0;
};

/// Client registry and per-session byte accounting. Thread-safe.
class TrafficMeter {
public:
    TrafficMeter(MeterOptions options, const Clock& clock, SessionStore* store = nullptr, EventBus* events = nullptr);

    void set_observer(MeterObserver* observer) { observer_ = observer; }
    const MeterOptions& options() const { return options_; }

    bool accepts(Ipv4Address ip) const;

    /// Idempotent. Throws ClientRejected for addresses outside the subnet.
    ClientRecord register_client(Ipv4Address ip, DiscoverySource source = DiscoverySource::proxy_session);

    /// Registers the client implicitly. A deny verdict yields an already-finalized zero-byte session.
    SessionHandle open_session(Ipv4Address ip, ProxyProtocol protocol, std::optional<TargetAddress> target,
                               AdmissionDecision verdict);

    /// Adds `bytes` to one counter and returns the new running total for that direction.
    std::uint64_t record_transfer(const SessionHandle& session, Direction dir, std::uint64_t bytes);

    /// Freezes counters and persists the record. Idempotent. A failed store write is queued
    /// for retry (see flush_pending) and the record is still returned.
    SessionRecord finalize_session(const SessionHandle& session);

    /// One discovery round over the configured subnet. Returns the online clients.
    std::vector<ClientRecord> discover_clients(Prober& prober);

    /// Throws NotFound for an unknown identifier/ip.
    ClientStats get_client_stats(std::string_view identifier_or_ip,
                                 std::optional<TimeRange> window = std::nullopt) const;
    std::optional<ClientRecord> find_client(std::string_view identifier_or_ip) const;

    std::vector<ClientRecord> clients() const;
    std::vector<ClientRecord> online_clients_by_first_seen() const;
    std::vector<SessionHandle> live_sessions(std::optional<Ipv4Address> ip = std::nullopt) const;
    /// Finalized sessions from this run plus point-in-time copies of live sessions.
    std::vector<SessionRecord> sessions(std::optional<Ipv4Address> ip = std::nullopt) const;
    MeterTotals totals() const;
    std::size_t live_session_count() const;

    /// All clients, their stats and the global totals taken at a single instant.
    MeterSnapshot snapshot() const;

    /// Blocks until `session` is finalized or `timeout` passes.
    bool wait_finalized(const SessionHandle& session, Millis timeout) const;

    /// Seeds history from a store at startup: clients come back offline with their identifiers,
    /// finalized sessions count toward their totals. Call before any traffic.
    void restore(const std::vector<ClientRecord>& clients, const std::vector<SessionRecord>& sessions);

    /// Retries queued store writes; returns the number still pending.
    std::size_t flush_pending();
    std::size_t pending_writes() const;

    static SessionRecord to_record(const Session& s);

private:
    struct ClientEntry {
        ClientRecord record;
        std::uint64_t order = 0; // first-seen sequence number
        std::uint64_t final_up = 0;
        std::uint64_t final_down = 0;
        std::uint64_t final_count = 0;
        std::vector<SessionRecord> finalized;
        std::size_t live_count = 0;
    };

    // Caller holds mu_ exclusively. Returns true when the client transitioned to online.
    bool touch_client_locked(Ipv4Address ip, DiscoverySource source, Timestamp now, ClientRecord& out,
                             bool& created);
    ClientEntry* find_entry_locked(std::string_view identifier_or_ip);
    const ClientEntry* find_entry_locked(std::string_view identifier_or_ip) const;
    ClientStats stats_locked(const ClientEntry& e, std::optional<TimeRange> window, Timestamp now) const;
    void persist(const SessionRecord& rec);
    void publish_client(EventType type, const ClientRecord& rec);
    void publish_session(EventType type, const SessionRecord& rec);

    MeterOptions options_;
    const Clock& clock_;
    SessionStore* store_;
    EventBus* events_;
    MeterObserver* observer_ = nullptr;

    mutable std::shared_mutex mu_;
    std::map<Ipv4Address, ClientEntry> clients_;
    std::map<std::string, SessionHandle> live_;
    std::uint64_t next_identifier_ = 1;
    std::uint64_t next_session_ = 1;
    std::string session_prefix_;
    std::atomic<std::uint64_t> total_up_{0};
    std::atomic<std::uint64_t> total_down_{0};

    mutable std::mutex finalize_mu_;
    mutable std::condition_variable finalize_cv_;

    mutable std::mutex pending_mu_;
    std::deque<SessionRecord> pending_;
};

} // namespace gateway
