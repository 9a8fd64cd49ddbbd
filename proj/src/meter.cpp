#include "gateway/meter.hpp"

#include <cinttypes>
#include <cstdio>

#include <algorithm>
#include <random>
#include <tuple>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace gateway {

void Session::set_terminator(std::function<void()> fn)
{
    bool run_now = false;
    {
        std::lock_guard lock(term_mu_);
        terminator_ = std::move(fn);
        run_now = terminated_;
    }
    // A disconnect that raced ahead of the relay setup still takes effect.
    if (run_now && terminator_)
        terminator_();
}

bool Session::terminate()
{
    std::function<void()> fn;
    {
        std::lock_guard lock(term_mu_);
        if (terminated_)
            return static_cast<bool>(terminator_);
        terminated_ = true;
        fn = terminator_;
    }
    if (fn)
        fn();
    return static_cast<bool>(fn);
}

bool Session::terminated() const
{
    std::lock_guard lock(term_mu_);
    return terminated_;
}

TrafficMeter::TrafficMeter(MeterOptions options, const Clock& clock, SessionStore* store, EventBus* events)
    : options_(options), clock_(clock), store_(store), events_(events)
{
    std::random_device rd;
    session_prefix_ = fmt::format("{:08x}", rd());
}

bool TrafficMeter::accepts(Ipv4Address ip) const
{
    return options_.subnet.contains(ip) || (options_.allow_loopback && ip.is_loopback());
}

bool TrafficMeter::touch_client_locked(Ipv4Address ip, DiscoverySource source, Timestamp now, ClientRecord& out,
                                       bool& created)
{
    auto [it, inserted] = clients_.try_emplace(ip);
    auto& rec = it->second.record;
    created = inserted;
    bool became_online = false;
    if (inserted) {
        rec.ip = ip;
        it->second.order = next_identifier_;
        rec.identifier = fmt::format("Client-{}", next_identifier_++);
        rec.first_seen = now;
        rec.discovery_source = source;
        became_online = true;
    } else if (!rec.online) {
        became_online = true;
    }
    rec.online = true;
    if (now > rec.last_seen)
        rec.last_seen = now;
    if (rec.last_seen < rec.first_seen)
        rec.last_seen = rec.first_seen;
    out = rec;
    return became_online;
}

ClientRecord TrafficMeter::register_client(Ipv4Address ip, DiscoverySource source)
{
    if (!accepts(ip))
        throw ClientRejected(fmt::format("{} is outside subnet {}", ip.to_string(), options_.subnet.to_string()));
    ClientRecord rec;
    bool created = false;
    bool online;
    {
        std::unique_lock lock(mu_);
        online = touch_client_locked(ip, source, clock_.now(), rec, created);
    }
    if (created && store_) {
        try {
            store_->put_client(rec);
        } catch (const std::exception& e) {
            spdlog::warn("store: cannot record client {}: {}", ip.to_string(), e.what());
        }
    }
    if (online) {
        publish_client(EventType::client_joined, rec);
        if (observer_)
            observer_->on_client_online(rec);
    }
    return rec;
}

SessionHandle TrafficMeter::open_session(Ipv4Address ip, ProxyProtocol protocol, std::optional<TargetAddress> target,
                                         AdmissionDecision verdict)
{
    register_client(ip);
    SessionRecord base;
    base.client_ip = ip;
    base.protocol = protocol;
    base.target = std::move(target);
    base.verdict = std::move(verdict);
    base.started_at = clock_.now();

    const bool denied = !base.verdict.allowed();
    SessionHandle session;
    {
        std::unique_lock lock(mu_);
        base.session_id = fmt::format("{}-{}", session_prefix_, next_session_++);
        session = SessionHandle(new Session(base));
        live_.emplace(session->id(), session);
        ++clients_[ip].live_count;
    }
    publish_session(EventType::session_opened, base);
    if (denied)
        finalize_session(session);
    return session;
}

std::uint64_t TrafficMeter::record_transfer(const SessionHandle& session, Direction dir, std::uint64_t bytes)
{
    std::uint64_t total;
    {
        std::shared_lock lock(mu_);
        if (session->finalized())
            throw SessionFinalizedError(fmt::format("session {} is already finalized", session->id()));
        if (dir == Direction::up) {
            total = session->up_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
            total_up_.fetch_add(bytes, std::memory_order_relaxed);
        } else {
            total = session->down_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
            total_down_.fetch_add(bytes, std::memory_order_relaxed);
        }
    }
    if (observer_ && bytes > 0)
        observer_->on_transfer(session->client_ip(), dir, bytes, clock_.now());
    return total;
}

SessionRecord TrafficMeter::to_record(const Session& s)
{
    if (s.finalized())
        return s.final_record_;
    SessionRecord r = s.base_;
    r.bytes_up = s.bytes_up();
    r.bytes_down = s.bytes_down();
    return r;
}

SessionRecord TrafficMeter::finalize_session(const SessionHandle& session)
{
    SessionRecord rec;
    {
        std::unique_lock lock(mu_);
        if (session->finalized())
            return session->final_record_;
        rec = session->base_;
        rec.ended_at = std::max(clock_.now(), rec.started_at);
        rec.bytes_up = session->bytes_up();
        rec.bytes_down = session->bytes_down();
        session->final_record_ = rec;
        session->finalized_.store(true, std::memory_order_release);

        live_.erase(session->id());
        auto& entry = clients_[rec.client_ip];
        if (entry.live_count > 0)
            --entry.live_count;
        entry.final_up += rec.bytes_up;
        entry.final_down += rec.bytes_down;
        ++entry.final_count;
        entry.finalized.push_back(rec);
        if (*rec.ended_at > entry.record.last_seen)
            entry.record.last_seen = *rec.ended_at;
    }
    {
        std::lock_guard lock(finalize_mu_);
    }
    finalize_cv_.notify_all();

    persist(rec);
    publish_session(EventType::session_closed, rec);
    if (observer_)
        observer_->on_session_finalized(rec);
    return rec;
}

void TrafficMeter::restore(const std::vector<ClientRecord>& clients, const std::vector<SessionRecord>& sessions)
{
    std::unique_lock lock(mu_);
    auto ordered = clients;
    std::sort(ordered.begin(), ordered.end(),
              [](const ClientRecord& a, const ClientRecord& b) { return a.first_seen < b.first_seen; });
    for (const auto& c : ordered) {
        auto [it, inserted] = clients_.try_emplace(c.ip);
        if (!inserted)
            continue;
        it->second.record = c;
        it->second.record.online = false;
        if (it->second.record.last_seen < c.first_seen)
            it->second.record.last_seen = c.first_seen;
        std::uint64_t k = 0;
        if (std::sscanf(c.identifier.c_str(), "Client-%" SCNu64, &k) == 1 && k >= next_identifier_)
            next_identifier_ = k + 1;
        it->second.order = k;
    }
    for (const auto& rec : sessions) {
        auto& entry = clients_[rec.client_ip];
        if (entry.record.identifier.empty()) {
            // Session without a client row: give it a fresh identity.
            entry.record.ip = rec.client_ip;
            entry.order = next_identifier_;
            entry.record.identifier = fmt::format("Client-{}", next_identifier_++);
            entry.record.first_seen = rec.started_at;
            entry.record.last_seen = rec.started_at;
        }
        entry.final_up += rec.bytes_up;
        entry.final_down += rec.bytes_down;
        ++entry.final_count;
        entry.finalized.push_back(rec);
        if (rec.ended_at && *rec.ended_at > entry.record.last_seen)
            entry.record.last_seen = *rec.ended_at;
        total_up_ += rec.bytes_up;
        total_down_ += rec.bytes_down;
    }
}

void TrafficMeter::persist(const SessionRecord& rec)
{
    if (!store_)
        return;
    std::lock_guard lock(pending_mu_);
    if (pending_.empty()) {
        try {
            store_->put_session(rec);
            return;
        } catch (const std::exception& e) {
            spdlog::warn("store: write of session {} failed, queued for retry: {}", rec.session_id, e.what());
        }
    }
    // Preserve write order behind earlier failures.
    pending_.push_back(rec);
}

std::size_t TrafficMeter::flush_pending()
{
    std::lock_guard lock(pending_mu_);
    while (!pending_.empty() && store_) {
        try {
            store_->put_session(pending_.front());
        } catch (const std::exception& e) {
            spdlog::debug("store: retry failed: {}", e.what());
            break;
        }
        pending_.pop_front();
    }
    return pending_.size();
}

std::size_t TrafficMeter::pending_writes() const
{
    std::lock_guard lock(pending_mu_);
    return pending_.size();
}

bool TrafficMeter::wait_finalized(const SessionHandle& session, Millis timeout) const
{
    std::unique_lock lock(finalize_mu_);
    return finalize_cv_.wait_for(lock, timeout, [&] { return session->finalized(); });
}

std::vector<ClientRecord> TrafficMeter::discover_clients(Prober& prober)
{
    const Timestamp round_start = clock_.now();
    std::vector<Ipv4Address> candidates = options_.subnet.hosts();

    auto responders = prober.probe(candidates);
    if (!responders) {
        spdlog::warn("discovery: probe failed, skipping this round");
        return online_clients_by_first_seen();
    }

    std::vector<ClientRecord> joined;
    std::vector<ClientRecord> left;
    std::vector<ClientRecord> created_records;
    {
        std::unique_lock lock(mu_);
        const Timestamp now = clock_.now();
        for (auto ip : *responders) {
            if (!accepts(ip))
                continue;
            ClientRecord rec;
            bool created = false;
            // Stamp with the round start: the moment the client was known reachable.
            if (touch_client_locked(ip, DiscoverySource::probe, round_start, rec, created))
                joined.push_back(rec);
            if (created)
                created_records.push_back(rec);
        }
        const auto offline_after = 2 * options_.probe_interval;
        for (auto& [ip, entry] : clients_) {
            if (responders->contains(ip))
                continue;
            auto& rec = entry.record;
            if (entry.live_count > 0) {
                rec.last_seen = std::max(rec.last_seen, now);
                continue;
            }
            if (rec.online && now - rec.last_seen >= offline_after) {
                rec.online = false;
                left.push_back(rec);
            }
        }
    }

    for (const auto& rec : created_records) {
        if (store_) {
            try {
                store_->put_client(rec);
            } catch (const std::exception& e) {
                spdlog::warn("store: cannot record client {}: {}", rec.ip.to_string(), e.what());
            }
        }
    }
    for (const auto& rec : joined) {
        publish_client(EventType::client_joined, rec);
        if (observer_)
            observer_->on_client_online(rec);
    }
    for (const auto& rec : left) {
        publish_client(EventType::client_left, rec);
        if (observer_)
            observer_->on_client_offline(rec);
    }
    return online_clients_by_first_seen();
}

TrafficMeter::ClientEntry* TrafficMeter::find_entry_locked(std::string_view key)
{
    if (auto ip = Ipv4Address::parse(key)) {
        auto it = clients_.find(*ip);
        return it == clients_.end() ? nullptr : &it->second;
    }
    for (auto& [_, e] : clients_) {
        if (e.record.identifier == key)
            return &e;
    }
    return nullptr;
}

const TrafficMeter::ClientEntry* TrafficMeter::find_entry_locked(std::string_view key) const
{
    return const_cast<TrafficMeter*>(this)->find_entry_locked(key);
}

ClientStats TrafficMeter::stats_locked(const ClientEntry& e, std::optional<TimeRange> window, Timestamp now) const
{
    ClientStats st;
    auto overlaps = [&](Timestamp start, std::optional<Timestamp> end) {
        if (!window)
            return true;
        return start <= window->to && end.value_or(now) >= window->from;
    };
    if (!window) {
        st.bytes_up = e.final_up;
        st.bytes_down = e.final_down;
        st.session_count = e.final_count;
    } else {
        for (const auto& s : e.finalized) {
            if (!overlaps(s.started_at, s.ended_at))
                continue;
            st.bytes_up += s.bytes_up;
            st.bytes_down += s.bytes_down;
            ++st.session_count;
        }
    }
    for (const auto& [_, s] : live_) {
        if (s->client_ip() != e.record.ip || !overlaps(s->started_at(), std::nullopt))
            continue;
        st.bytes_up += s->bytes_up();
        st.bytes_down += s->bytes_down();
        ++st.session_count;
        ++st.live_sessions;
    }
    return st;
}

ClientStats TrafficMeter::get_client_stats(std::string_view key, std::optional<TimeRange> window) const
{
    // Exclusive so live counters and finalized aggregates come from the same instant.
    std::unique_lock lock(mu_);
    const auto* e = find_entry_locked(key);
    if (!e)
        throw NotFound(fmt::format("unknown client '{}'", key));
    return stats_locked(*e, window, clock_.now());
}

std::optional<ClientRecord> TrafficMeter::find_client(std::string_view key) const
{
    std::shared_lock lock(mu_);
    const auto* e = find_entry_locked(key);
    if (!e)
        return std::nullopt;
    return e->record;
}

std::vector<ClientRecord> TrafficMeter::clients() const
{
    std::shared_lock lock(mu_);
    std::vector<ClientRecord> out;
    for (const auto& [_, e] : clients_)
        out.push_back(e.record);
    return out;
}

std::vector<ClientRecord> TrafficMeter::online_clients_by_first_seen() const
{
    std::vector<const ClientEntry*> entries;
    std::shared_lock lock(mu_);
    for (const auto& [_, e] : clients_) {
        if (e.record.online)
            entries.push_back(&e);
    }
    std::sort(entries.begin(), entries.end(), [](const ClientEntry* a, const ClientEntry* b) {
        return std::tie(a->record.first_seen, a->order) < std::tie(b->record.first_seen, b->order);
    });
    std::vector<ClientRecord> out;
    for (const auto* e : entries)
        out.push_back(e->record);
    return out;
}

std::vector<SessionHandle> TrafficMeter::live_sessions(std::optional<Ipv4Address> ip) const
{
    std::shared_lock lock(mu_);
    std::vector<SessionHandle> out;
    for (const auto& [_, s] : live_) {
        if (!ip || s->client_ip() == *ip)
            out.push_back(s);
    }
    return out;
}

std::vector<SessionRecord> TrafficMeter::sessions(std::optional<Ipv4Address> ip) const
{
    std::shared_lock lock(mu_);
    std::vector<SessionRecord> out;
    for (const auto& [cip, e] : clients_) {
        if (ip && cip != *ip)
            continue;
        out.insert(out.end(), e.finalized.begin(), e.finalized.end());
    }
    for (const auto& [_, s] : live_) {
        if (!ip || s->client_ip() == *ip)
            out.push_back(to_record(*s));
    }
    return out;
}

MeterTotals TrafficMeter::totals() const
{
    std::unique_lock lock(mu_);
    return {total_up_.load(), total_down_.load()};
}

std::size_t TrafficMeter::live_session_count() const
{
    std::shared_lock lock(mu_);
    return live_.size();
}

MeterSnapshot TrafficMeter::snapshot() const
{
    std::unique_lock lock(mu_);
    MeterSnapshot snap;
    snap.at = clock_.now();
    for (const auto& [_, e] : clients_)
        snap.clients.push_back({e.record, stats_locked(e, std::nullopt, snap.at)});
    snap.totals = {total_up_.load(), total_down_.load()};
    snap.live_sessions = live_.size();
    return snap;
}

void TrafficMeter::publish_client(EventType type, const ClientRecord& rec)
{
    if (!events_)
        return;
    events_->publish(type, {{"client_ip", rec.ip.to_string()},
                            {"identifier", rec.identifier},
                            {"timestamp", format_timestamp(clock_.now())},
                            {"detail", type == EventType::client_joined ? "online" : "offline"},
                            {"client", rec}});
}

void TrafficMeter::publish_session(EventType type, const SessionRecord& rec)
{
    if (!events_)
        return;
    std::string identifier;
    {
        std::shared_lock lock(mu_);
        if (auto it = clients_.find(rec.client_ip); it != clients_.end())
            identifier = it->second.record.identifier;
    }
    events_->publish(type, {{"client_ip", rec.client_ip.to_string()},
                            {"identifier", identifier},
                            {"timestamp", format_timestamp(clock_.now())},
                            {"detail", rec.verdict.allowed() ? std::string("allow") : rec.verdict.detail},
                            {"session", rec}});
}

} // namespace gateway
