#pragma once

#include "gateway/anomaly.hpp"
#include "gateway/events.hpp"
#include "gateway/filter.hpp"
#include "gateway/meter.hpp"
#include "gateway/quota.hpp"

#include <memory>
#include <mutex>

namespace gateway {

struct BlockEvent {
    Ipv4Address client_ip;
    std::string identifier;
    Timestamp blocked_until{};
    std::uint64_t used_bytes = 0;
    std::uint64_t allocated_bytes = 0;
    std::string detail;
};

/// Quota allocation, block/cooldown, filtering and anomaly detection on top of the meter.
/// All quota state transitions serialize through one mutex; admission checks are read-only.
class TrafficManager final : public MeterObserver {
public:
    TrafficManager(QuotaPolicy policy, FilterRuleSet rules, AnomalySettings anomaly, const Clock& clock,
                   EventBus* events = nullptr);

    /// Registers as the meter's observer; needed for disconnects and identifier lookups.
    void attach(TrafficMeter& meter);

    /// Fixed order: active block, domain rule, port rule, allow. Never mutates state.
    AdmissionDecision check_admission(Ipv4Address client_ip, const TargetAddress& target, Timestamp now) const;

    /// Sets the client's usage to `new_used_bytes` and applies block/unblock transitions.
    /// Returns the BlockEvent when this update starts a block episode.
    std::optional<BlockEvent> on_usage_update(Ipv4Address client_ip, std::uint64_t new_used_bytes, Timestamp now);
    std::optional<BlockEvent> add_usage(Ipv4Address client_ip, std::uint64_t bytes, Timestamp now);

    /// Replaces the active membership (ordered by first_seen) and recomputes allocations.
    void set_active_clients(std::span<const Ipv4Address> ordered);

    /// Throws std::invalid_argument naming the offending field.
    QuotaPolicy put_quota_policy(const QuotaPolicy& policy);
    /// Throws FilterError naming the offending entry. Applies to the next admission check.
    void put_filter_rules(FilterRuleSet rules);

    /// Closes and finalizes all live sessions of `client_ip`, then blocks it for the cooldown.
    /// Throws NotFound for a client the meter has never seen.
    std::size_t disconnect_client(Ipv4Address client_ip, const std::string& reason,
                                  Millis finalize_wait = Millis{2000});

    /// Expires finished cooldowns and evaluates anomaly detection for every tracked client.
    std::vector<AnomalyAlert> tick(Timestamp now);

    QuotaPolicy policy() const;
    std::shared_ptr<const FilterRuleSet> rules() const;
    AllocationState allocations() const;
    std::optional<ClientAllocation> allocation(Ipv4Address ip) const;

    void set_baseline(Ipv4Address ip, ConsumptionBaseline baseline);
    ConsumptionBaseline baseline(Ipv4Address ip) const;
    const AnomalySettings& anomaly_settings() const { return anomaly_settings_; }

    void on_client_online(const ClientRecord&) override;
    void on_client_offline(const ClientRecord&) override;
    void on_transfer(Ipv4Address ip, Direction dir, std::uint64_t bytes, Timestamp now) override;
    void on_session_finalized(const SessionRecord& rec) override;

private:
    struct Notice {
        EventType type;
        Ipv4Address ip;
        std::string detail;
        nlohmann::json extra;
    };

    // Caller holds mu_.
    ClientAllocation* state_locked(Ipv4Address ip);
    bool expire_locked(Ipv4Address ip, ClientAllocation& a, Timestamp now, std::vector<Notice>& out);
    std::optional<BlockEvent> maybe_block_locked(Ipv4Address ip, ClientAllocation& a, Timestamp now,
                                                 std::vector<Notice>& out);
    void recompute_locked(std::vector<Notice>& out);
    void refresh_membership();
    void emit(const std::vector<Notice>& notices);
    std::string identifier_of(Ipv4Address ip) const;

    const Clock& clock_;
    EventBus* events_;
    TrafficMeter* meter_ = nullptr;
    const AnomalySettings anomaly_settings_;

    mutable std::mutex mu_;
    QuotaPolicy policy_;
    std::vector<Ipv4Address> active_;
    AllocationState allocations_; // active clients
    AllocationState dormant_;     // usage/block state of clients that went offline
    ConsumptionTracker tracker_;

    mutable std::mutex rules_mu_;
    std::shared_ptr<const FilterRuleSet> rules_;
};

} // namespace gateway
