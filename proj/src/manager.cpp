#include "gateway/manager.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace gateway {

namespace {

long long seconds_until(Timestamp until, Timestamp now)
{
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(until - now).count();
    return (left + 999) / 1000;
}

} // namespace

TrafficManager::TrafficManager(QuotaPolicy policy, FilterRuleSet rules, AnomalySettings anomaly, const Clock& clock,
                               EventBus* events)
    : clock_(clock), events_(events), anomaly_settings_(anomaly), policy_(policy), tracker_(anomaly),
      rules_(std::make_shared<const FilterRuleSet>(std::move(rules)))
{
    if (auto err = policy_.validation_error(); !err.empty())
        throw std::invalid_argument(err);
    validate_rules(*rules_);
}

void TrafficManager::attach(TrafficMeter& meter)
{
    meter_ = &meter;
    meter.set_observer(this);
    refresh_membership();
}

AdmissionDecision TrafficManager::check_admission(Ipv4Address client_ip, const TargetAddress& target,
                                                  Timestamp now) const
{
    {
        std::lock_guard lock(mu_);
        const ClientAllocation* a = nullptr;
        if (auto it = allocations_.find(client_ip); it != allocations_.end())
            a = &it->second;
        else if (auto d = dormant_.find(client_ip); d != dormant_.end())
            a = &d->second;
        if (a && a->blocked_until && *a->blocked_until > now) {
            return AdmissionDecision::deny(
                Verdict::deny_quota,
                fmt::format("quota exhausted; cooldown ends in {}s", seconds_until(*a->blocked_until, now)));
        }
    }
    auto rules = this->rules();
    if (auto hit = matching_domain_rule(target.host, *rules))
        return AdmissionDecision::deny(Verdict::deny_filter_domain, fmt::format("domain {} blocked by rule {}", target.host, *hit));
    if (port_blocked(target.port, *rules))
        return AdmissionDecision::deny(Verdict::deny_filter_port, fmt::format("port {} blocked", target.port));
    return AdmissionDecision::allow();
}

ClientAllocation* TrafficManager::state_locked(Ipv4Address ip)
{
    if (auto it = allocations_.find(ip); it != allocations_.end())
        return &it->second;
    return &dormant_[ip];
}

bool TrafficManager::expire_locked(Ipv4Address ip, ClientAllocation& a, Timestamp now, std::vector<Notice>& out)
{
    if (!a.blocked_until || *a.blocked_until > now)
        return false;
    a.blocked_until.reset();
    a.used_bytes = 0;
    out.push_back({EventType::unblock, ip, "cooldown elapsed; quota window restarted", {}});
    return true;
}

std::optional<BlockEvent> TrafficManager::maybe_block_locked(Ipv4Address ip, ClientAllocation& a, Timestamp now,
                                                             std::vector<Notice>& out)
{
    if (a.blocked_until || a.used_bytes == 0 || a.used_bytes < a.allocated_bytes)
        return std::nullopt;
    if (!allocations_.contains(ip))
        return std::nullopt; // no allocation while not an active client
    a.blocked_until = now + policy_.cooldown;
    BlockEvent ev;
    ev.client_ip = ip;
    ev.blocked_until = *a.blocked_until;
    ev.used_bytes = a.used_bytes;
    ev.allocated_bytes = a.allocated_bytes;
    ev.detail = fmt::format("quota reached ({} of {} bytes); new sessions rejected until {}", a.used_bytes,
                            a.allocated_bytes, format_timestamp(*a.blocked_until));
    out.push_back({EventType::block, ip, ev.detail,
                   {{"blocked_until", format_timestamp(ev.blocked_until)},
                    {"used_bytes", ev.used_bytes},
                    {"allocated_bytes", ev.allocated_bytes}}});
    return ev;
}

std::optional<BlockEvent> TrafficManager::on_usage_update(Ipv4Address client_ip, std::uint64_t new_used_bytes,
                                                          Timestamp now)
{
    std::vector<Notice> notices;
    std::optional<BlockEvent> ev;
    {
        std::lock_guard lock(mu_);
        auto& a = *state_locked(client_ip);
        expire_locked(client_ip, a, now, notices);
        a.used_bytes = new_used_bytes;
        ev = maybe_block_locked(client_ip, a, now, notices);
    }
    emit(notices);
    if (ev)
        ev->identifier = identifier_of(client_ip);
    return ev;
}

std::optional<BlockEvent> TrafficManager::add_usage(Ipv4Address client_ip, std::uint64_t bytes, Timestamp now)
{
    std::vector<Notice> notices;
    std::optional<BlockEvent> ev;
    {
        std::lock_guard lock(mu_);
        auto& a = *state_locked(client_ip);
        expire_locked(client_ip, a, now, notices);
        a.used_bytes += bytes;
        ev = maybe_block_locked(client_ip, a, now, notices);
    }
    if (!notices.empty())
        emit(notices);
    if (ev)
        ev->identifier = identifier_of(client_ip);
    return ev;
}

void TrafficManager::recompute_locked(std::vector<Notice>& out)
{
    AllocationState previous = allocations_;
    for (auto ip : active_) {
        if (auto d = dormant_.find(ip); d != dormant_.end()) {
            previous[ip] = d->second;
            dormant_.erase(d);
        }
    }
    for (auto& [ip, a] : allocations_) {
        if (std::find(active_.begin(), active_.end(), ip) == active_.end()) {
            a.allocated_bytes = 0;
            dormant_[ip] = a;
        }
    }
    allocations_ = compute_allocations(policy_, active_, previous);
    const auto now = clock_.now();
    for (auto& [ip, a] : allocations_) {
        expire_locked(ip, a, now, out);
        maybe_block_locked(ip, a, now, out);
    }
}

void TrafficManager::set_active_clients(std::span<const Ipv4Address> ordered)
{
    std::vector<Notice> notices;
    {
        std::lock_guard lock(mu_);
        active_.assign(ordered.begin(), ordered.end());
        recompute_locked(notices);
    }
    emit(notices);
}

void TrafficManager::refresh_membership()
{
    if (!meter_)
        return;
    std::vector<Ipv4Address> ordered;
    for (const auto& c : meter_->online_clients_by_first_seen())
        ordered.push_back(c.ip);
    set_active_clients(ordered);
}

QuotaPolicy TrafficManager::put_quota_policy(const QuotaPolicy& policy)
{
    if (auto err = policy.validation_error(); !err.empty())
        throw std::invalid_argument(err);
    std::vector<Notice> notices;
    {
        std::lock_guard lock(mu_);
        policy_ = policy;
        recompute_locked(notices);
    }
    emit(notices);
    return policy;
}

void TrafficManager::put_filter_rules(FilterRuleSet rules)
{
    validate_rules(rules);
    auto next = std::make_shared<const FilterRuleSet>(std::move(rules));
    std::lock_guard lock(rules_mu_);
    rules_ = std::move(next);
}

std::size_t TrafficManager::disconnect_client(Ipv4Address client_ip, const std::string& reason, Millis finalize_wait)
{
    if (!meter_ || !meter_->find_client(client_ip.to_string()))
        throw NotFound(fmt::format("unknown client {}", client_ip.to_string()));

    auto sessions = meter_->live_sessions(client_ip);
    for (auto& s : sessions)
        s->terminate();
    for (auto& s : sessions) {
        if (!meter_->wait_finalized(s, finalize_wait))
            meter_->finalize_session(s);
    }

    std::vector<Notice> notices;
    {
        std::lock_guard lock(mu_);
        const auto now = clock_.now();
        auto& a = *state_locked(client_ip);
        a.blocked_until = now + policy_.cooldown;
        const auto detail = fmt::format("disconnected by operator{}{}; new sessions rejected until {}",
                                        reason.empty() ? "" : ": ", reason, format_timestamp(*a.blocked_until));
        notices.push_back({EventType::block, client_ip, detail,
                           {{"blocked_until", format_timestamp(*a.blocked_until)},
                            {"used_bytes", a.used_bytes},
                            {"allocated_bytes", a.allocated_bytes},
                            {"terminated_sessions", sessions.size()}}});
    }
    emit(notices);
    return sessions.size();
}

std::vector<AnomalyAlert> TrafficManager::tick(Timestamp now)
{
    std::vector<Notice> notices;
    std::vector<AnomalyAlert> alerts;
    {
        std::lock_guard lock(mu_);
        for (auto& [ip, a] : allocations_) {
            expire_locked(ip, a, now, notices);
            maybe_block_locked(ip, a, now, notices);
        }
        for (auto& [ip, a] : dormant_)
            expire_locked(ip, a, now, notices);
        for (auto ip : tracker_.tracked_clients()) {
            if (auto alert = tracker_.evaluate(ip, now))
                alerts.push_back(*alert);
        }
    }
    for (auto& alert : alerts) {
        alert.identifier = identifier_of(alert.client_ip);
        notices.push_back({EventType::anomaly, alert.client_ip,
                           fmt::format("sustained {:.0f} B/s exceeds {}x baseline {:.0f} B/s", alert.rate,
                                       alert.multiplier, alert.baseline),
                           {{"rate", alert.rate}, {"baseline", alert.baseline}, {"multiplier", alert.multiplier}}});
    }
    emit(notices);
    return alerts;
}

QuotaPolicy TrafficManager::policy() const
{
    std::lock_guard lock(mu_);
    return policy_;
}

std::shared_ptr<const FilterRuleSet> TrafficManager::rules() const
{
    std::lock_guard lock(rules_mu_);
    return rules_;
}

AllocationState TrafficManager::allocations() const
{
    std::lock_guard lock(mu_);
    return allocations_;
}

std::optional<ClientAllocation> TrafficManager::allocation(Ipv4Address ip) const
{
    std::lock_guard lock(mu_);
    if (auto it = allocations_.find(ip); it != allocations_.end())
        return it->second;
    if (auto it = dormant_.find(ip); it != dormant_.end())
        return it->second;
    return std::nullopt;
}

void TrafficManager::set_baseline(Ipv4Address ip, ConsumptionBaseline baseline)
{
    std::lock_guard lock(mu_);
    tracker_.set_baseline(ip, baseline);
}

ConsumptionBaseline TrafficManager::baseline(Ipv4Address ip) const
{
    std::lock_guard lock(mu_);
    return tracker_.baseline(ip);
}

void TrafficManager::on_client_online(const ClientRecord&)
{
    refresh_membership();
}

void TrafficManager::on_client_offline(const ClientRecord&)
{
    refresh_membership();
}

void TrafficManager::on_transfer(Ipv4Address ip, Direction, std::uint64_t bytes, Timestamp now)
{
    {
        std::lock_guard lock(mu_);
        tracker_.on_bytes(ip, bytes, now);
    }
    add_usage(ip, bytes, now);
}

void TrafficManager::on_session_finalized(const SessionRecord& rec)
{
    if (!rec.verdict.allowed() || !rec.ended_at)
        return;
    std::lock_guard lock(mu_);
    tracker_.on_session_finished(rec.client_ip, rec.bytes_up + rec.bytes_down,
                                 std::chrono::duration_cast<Millis>(*rec.ended_at - rec.started_at));
}

std::string TrafficManager::identifier_of(Ipv4Address ip) const
{
    if (!meter_)
        return ip.to_string();
    auto c = meter_->find_client(ip.to_string());
    return c ? c->identifier : ip.to_string();
}

void TrafficManager::emit(const std::vector<Notice>& notices)
{
    for (const auto& n : notices) {
        if (n.type == EventType::block)
            spdlog::info("client {} blocked: {}", n.ip.to_string(), n.detail);
        else if (n.type == EventType::anomaly)
            spdlog::warn("client {} anomaly: {}", n.ip.to_string(), n.detail);
        if (!events_)
            continue;
        nlohmann::json payload = {{"client_ip", n.ip.to_string()},
                                  {"identifier", identifier_of(n.ip)},
                                  {"timestamp", format_timestamp(clock_.now())},
                                  {"detail", n.detail}};
        if (n.extra.is_object())
            payload.update(n.extra);
        events_->publish(n.type, std::move(payload));
    }
}

} // namespace gateway
