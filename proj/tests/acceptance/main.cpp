// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
// Tolerances are pinned in `tol` below.

#include "gateway/gateway.hpp"
#include "gateway/harness.hpp"
#include "gateway/http_message.hpp"

#include "filter_oracle.hpp"
#include "support.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <csignal>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>

#include <sys/wait.h>

using namespace gateway;
using namespace gateway::testing;
using nlohmann::json;

namespace tol {
constexpr std::uint64_t kAccountingBytes = 0;     // exact
constexpr double kJfiOracle = 1e-12;              // |closed form - naive|
constexpr int kJfiOracleVectors = 1000;
constexpr double kJfiFloor = 0.9;                 // every repetition
constexpr int kJfiRepetitions = 5;
constexpr double kJfiLinkBps = 20e6;
constexpr int kFilterPairs = 10'000;
constexpr int kDiscoveryTrials = 5;
constexpr Millis kDiscoveryInterval{1000};
constexpr Millis kDiscoverySlack{50};             // polling + thread wake-up
constexpr Millis kPerfRun{60'000};
constexpr int kPerfSamplesExpected = 12;
constexpr int kPerfSamplesSlack = 2;
constexpr double kPerfLinkBps = 16e6;
constexpr double kPerfThroughput = 0.25;          // relative
constexpr double kOverheadFloor = 0.85;           // proxied / direct
} // namespace tol

namespace {

constexpr std::uint64_t MB = 1'000'000;
const Ipv4Address kLoopback{127, 0, 0, 1};

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Failed : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void require(bool cond, const std::string& what)
{
    if (!cond)
        throw Failed(what);
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

GatewayConfig loopback_config()
{
    GatewayConfig cfg;
    cfg.listen_address = kLoopback;
    cfg.advertise_address = kLoopback;
    cfg.allow_loopback_clients = true;
    cfg.probe_enabled = false;
    cfg.store_path = ":memory:";
    cfg.egress = EgressSelector::system_default();
    cfg.quota_policy.mode = QuotaMode::fixed;
    cfg.quota_policy.per_client_quota_bytes = std::uint64_t{1} << 60;
    return cfg;
}

GatewayOptions loopback_options()
{
    GatewayOptions o;
    o.ephemeral_ports = true;
    o.vpn_override = VpnStatus{};
    return o;
}

ClientStats settled(TrafficMeter& meter, Ipv4Address ip)
{
    ClientStats st;
    for (int i = 0; i < 500; ++i) {
        st = meter.get_client_stats(ip.to_string());
        if (st.live_sessions == 0)
            break;
        std::this_thread::sleep_for(Millis{10});
    }
    return st;
}

std::string socks_request(const std::string& host, std::uint16_t port)
{
    std::string r = bytes({0x05, 0x01, 0x00, 0x03, static_cast<int>(host.size())});
    r += host;
    r += bytes({port >> 8, port & 0xff});
    return r;
}

std::string hex(std::string_view s)
{
    std::string out;
    for (unsigned char c : s)
        out += fmt::format("{:02x}", c);
    return out;
}

std::string unhex(std::string_view h)
{
    std::string out;
    for (std::size_t i = 0; i + 1 < h.size(); i += 2)
        out.push_back(static_cast<char>(std::stoi(std::string(h.substr(i, 2)), nullptr, 16)));
    return out;
}

// ---------------------------------------------------------------------------------------------

Outcome accounting()
{
    Gateway gw(loopback_config(), loopback_options());
    gw.start();
    std::vector<std::string> parts;

    {   // http_connect from 127.0.0.11
        const Ipv4Address src{127, 0, 0, 11};
        ScriptedServer origin(357, pattern(1024, 'k'));
        auto c = connect_tcp({kLoopback, gw.http_port()}, src, Millis{2000});
        send_all(c.fd(), fmt::format("CONNECT 127.0.0.1:{} HTTP/1.1\r\nHost: 127.0.0.1:{}\r\n\r\n", origin.port(),
                                     origin.port()));
        require(read_head(c.fd()) == "HTTP/1.1 200 Connection Established\r\n\r\n", "CONNECT handshake");
        send_all(c.fd(), pattern(357));
        const auto down = read_all(c.fd());
        c.close();
        const auto st = settled(gw.meter(), src);
        const std::uint64_t truth_up = origin.received().size();
        const std::uint64_t truth_down = down.size();
        require(truth_up == 357 && truth_down == 1024, "CONNECT fixture did not move 357/1024");
        require(st.bytes_up - truth_up <= tol::kAccountingBytes && truth_up - st.bytes_up <= tol::kAccountingBytes &&
                    st.bytes_down == truth_down,
                fmt::format("http_connect metered {}/{} vs {}/{}", st.bytes_up, st.bytes_down, truth_up, truth_down));
        parts.push_back(fmt::format("http_connect {}/{}", st.bytes_up, st.bytes_down));
    }
    {   // socks5 from 127.0.0.12
        const Ipv4Address src{127, 0, 0, 12};
        ScriptedServer origin(357, pattern(1024, 'q'));
        auto c = connect_tcp({kLoopback, gw.socks_port()}, src, Millis{2000});
        send_all(c.fd(), bytes({0x05, 0x01, 0x00}));
        require(read_n(c.fd(), 2) == bytes({0x05, 0x00}), "SOCKS method reply");
        send_all(c.fd(), socks_request("127.0.0.1", origin.port()));
        require(read_n(c.fd(), 10).substr(0, 2) == bytes({0x05, 0x00}), "SOCKS connect reply");
        send_all(c.fd(), pattern(357));
        const auto down = read_all(c.fd());
        c.close();
        const auto st = settled(gw.meter(), src);
        const std::uint64_t truth_up = origin.received().size();
        require(truth_up == 357 && down.size() == 1024, "SOCKS fixture did not move 357/1024");
        require(st.bytes_up == truth_up && st.bytes_down == down.size(),
                fmt::format("socks5 metered {}/{} vs {}/{}", st.bytes_up, st.bytes_down, truth_up, down.size()));
        parts.push_back(fmt::format("socks5 {}/{}", st.bytes_up, st.bytes_down));
    }
    {   // http_forward from 127.0.0.13; bytes are the forwarded messages as they cross the wire
        const Ipv4Address src{127, 0, 0, 13};
        const std::string body(1024 - 40, 'z');
        const auto response = fmt::format("HTTP/1.1 200 OK\r\nContent-Length: {}\r\n\r\n", body.size()) + body;
        HttpOrigin origin(response);
        const auto head = fmt::format("POST http://127.0.0.1:{}/upload HTTP/1.1\r\nHost: 127.0.0.1:{}\r\n"
                                      "Connection: close\r\nContent-Length: ",
                                      origin.port(), origin.port());
        const auto absolute_prefix = fmt::format("http://127.0.0.1:{}", origin.port()).size();
        std::string request;
        for (std::size_t n = 0; n < 357; ++n) {
            request = head + std::to_string(n) + "\r\n\r\n" + std::string(n, 'u');
            if (request.size() == 357 + absolute_prefix)
                break;
        }
        auto c = connect_tcp({kLoopback, gw.http_port()}, src, Millis{2000});
        send_all(c.fd(), request);
        const auto down = read_all(c.fd());
        c.close();
        const auto st = settled(gw.meter(), src);
        const std::uint64_t truth_up = origin.received().size();
        require(truth_up == 357 && down.size() == 1024, "forward fixture did not move 357/1024");
        require(st.bytes_up == truth_up && st.bytes_down == down.size(),
                fmt::format("http_forward metered {}/{} vs {}/{}", st.bytes_up, st.bytes_down, truth_up, down.size()));
        parts.push_back(fmt::format("http_forward {}/{}", st.bytes_up, st.bytes_down));
    }
    gw.stop(Millis{500});
    return {true, fmt::format("{} (tolerance {} B)", fmt::join(parts, ", "), tol::kAccountingBytes)};
}

/// JFI as 1 / (1 + CV^2) with population variance: algebraically equal, numerically independent.
std::optional<double> naive_jfi(const std::vector<double>& v)
{
    long double mean = 0;
    for (double x : v)
        mean += x;
    mean /= static_cast<long double>(v.size());
    if (mean == 0)
        return std::nullopt;
    long double var = 0;
    for (double x : v)
        var += (x - mean) * (x - mean);
    var /= static_cast<long double>(v.size());
    return static_cast<double>(1.0L / (1.0L + var / (mean * mean)));
}

Outcome jfi()
{
    std::mt19937_64 rng(20240501);
    double worst = 0;
    for (int i = 0; i < tol::kJfiOracleVectors; ++i) {
        std::vector<double> v(1 + rng() % 32);
        std::uniform_real_distribution<double> d(0.0, i % 2 ? 1e3 : 1e9);
        for (auto& x : v)
            x = (rng() % 7 == 0) ? 0.0 : d(rng);
        if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0; }))
            v[0] = 1;
        const auto got = compute_jfi(v);
        const auto want = naive_jfi(v);
        require(got && want, "oracle vector without a value");
        worst = std::max(worst, std::abs(*got - *want));
    }
    require(worst < tol::kJfiOracle, fmt::format("max |delta| {:.3g}", worst));
    for (std::size_t n = 1; n <= 16; ++n) {
        for (double c : {1.0, 3.0, 0.5, 1000.0}) {
            std::vector<double> equal(n, c);
            require(compute_jfi(equal) == 1.0, fmt::format("equal shares n={} gave {}", n, *compute_jfi(equal)));
            std::vector<double> one(n, 0.0);
            one[0] = c;
            require(compute_jfi(one) == 1.0 / static_cast<double>(n), fmt::format("single user n={}", n));
        }
    }

    TestOrigin origin;
    Gateway gw(loopback_config(), loopback_options());
    gw.start();
    std::vector<std::string> parts;
    for (int clients : {3, 5}) {
        LoadTestPlan plan;
        plan.client_count = clients;
        plan.protocol = ProxyProtocol::socks5;
        plan.duration_down = Millis{3000};
        plan.duration_up = Millis{1000};
        plan.repetitions = tol::kJfiRepetitions;
        plan.link_rate_limit = tol::kJfiLinkBps;
        plan.first_source_octet = 20 + clients * 10;
        auto report = run_load_test(plan, Endpoint{kLoopback, gw.socks_port()}, origin.endpoint());
        require(static_cast<int>(report.repetitions.size()) == tol::kJfiRepetitions,
                fmt::format("{} clients: {} of {} repetitions completed", clients, report.repetitions.size(),
                            tol::kJfiRepetitions));
        double lowest = 1.0;
        for (const auto& rep : report.repetitions) {
            require(rep.jfi_down.has_value(), "repetition without JFI");
            lowest = std::min(lowest, *rep.jfi_down);
        }
        require(lowest >= tol::kJfiFloor, fmt::format("{} clients: JFI_down {:.3f} < {}", clients, lowest, tol::kJfiFloor));
        parts.push_back(fmt::format("{} clients JFI_down min {:.3f} mean {:.3f}", clients, lowest,
                                    report.jfi_down.mean));
    }
    gw.stop(Millis{500});
    return {true, fmt::format("oracle max |delta| {:.2g} over {} vectors, bounds exact; {} ({} reps, {:.0f} Mbit/s link)",
                              worst, tol::kJfiOracleVectors, fmt::join(parts, "; "), tol::kJfiRepetitions,
                              tol::kJfiLinkBps / 1e6)};
}

Outcome quota()
{
    ManualClock clock;
    EventBus events;
    TrafficMeter meter(MeterOptions{}, clock, nullptr, &events);
    QuotaPolicy policy;
    policy.mode = QuotaMode::dynamic;
    policy.total_quota_bytes = 300 * MB;
    policy.cooldown = Millis{300'000};
    TrafficManager manager(policy, FilterRuleSet{}, AnomalySettings{}, clock, &events);
    manager.attach(meter);
    ScriptedProber prober;
    const Ipv4Address a{192, 168, 43, 2}, b{192, 168, 43, 3}, c{192, 168, 43, 4};

    prober.set_responders({a, b, c});
    meter.discover_clients(prober);
    for (auto ip : {a, b, c})
        require(manager.allocation(ip)->allocated_bytes == 100 * MB, "3 clients should get 100 MB each");

    prober.set_responders({a, c});
    clock.advance(MeterOptions{}.probe_interval * 2);
    meter.discover_clients(prober);
    require(manager.allocation(a)->allocated_bytes == 150 * MB && manager.allocation(c)->allocated_bytes == 150 * MB,
            "after a departure the remaining 2 should get 150 MB each");

    auto target = *TargetAddress::make("example.org", 443);
    auto s = meter.open_session(a, ProxyProtocol::socks5, target, AdmissionDecision::allow());
    meter.record_transfer(s, Direction::down, 150 * MB - 1);
    auto blocks = [&] {
        int n = 0;
        for (const auto& e : events.read_after(0, Millis::zero(), 100'000).events)
            n += e.type == EventType::block;
        return n;
    };
    require(blocks() == 0, "blocked below 100%");
    meter.record_transfer(s, Direction::down, 1);
    meter.record_transfer(s, Direction::down, 10 * MB);
    meter.finalize_session(s);
    require(blocks() == 1, fmt::format("{} BlockEvents instead of exactly 1", blocks()));
    require(manager.check_admission(a, target, clock.now()).verdict == Verdict::deny_quota,
            "new session admitted during cooldown");
    clock.advance(policy.cooldown - Millis{1});
    require(!manager.check_admission(a, target, clock.now()).allowed(), "admitted before cooldown end");
    clock.advance(Millis{1});
    manager.tick(clock.now());
    require(manager.check_admission(a, target, clock.now()).allowed(), "not re-admitted after cooldown");
    require(manager.allocation(a)->used_bytes == 0, "usage not reset after cooldown");
    require(blocks() == 1, "extra BlockEvent after readmission");
    return {true, "300 MB / 3 = 100 MB; departure -> 150 MB; 1 BlockEvent; cooldown deny then readmit (exact)"};
}

Outcome filter()
{
    std::mt19937_64 rng(7);
    auto mismatches = filter_oracle::compare_random(rng, tol::kFilterPairs);
    require(mismatches.empty(), fmt::format("{} disagreements, first: {}", mismatches.size(),
                                            mismatches.empty() ? "" : mismatches.front()));

    EventBus events;
    MeterOptions mo;
    mo.allow_loopback = true;
    TrafficMeter meter(mo, system_clock(), nullptr, &events);
    FilterRuleSet rules;
    rules.blocked_domains = {"youtube.com"};
    TrafficManager manager(QuotaPolicy{}, rules, AnomalySettings{}, system_clock(), &events);
    manager.attach(meter);
    CountingDialer dialer;
    ProxyServer proxy(ProxySettings{}, meter, manager, dialer);
    proxy.start(kLoopback, 0, 0);
    for (const char* host : {"youtube.com", "www.youtube.com", "m.youtube.com"}) {
        auto h = connect_tcp({kLoopback, proxy.http_port()}, std::nullopt, Millis{2000});
        send_all(h.fd(), fmt::format("CONNECT {}:443 HTTP/1.1\r\n\r\n", host));
        require(read_head(h.fd()).starts_with("HTTP/1.1 403"), fmt::format("CONNECT {} not refused", host));
        auto f = connect_tcp({kLoopback, proxy.http_port()}, std::nullopt, Millis{2000});
        send_all(f.fd(), fmt::format("GET http://{}/ HTTP/1.1\r\n\r\n", host));
        require(read_head(f.fd()).starts_with("HTTP/1.1 403"), fmt::format("GET {} not refused", host));
        auto s = connect_tcp({kLoopback, proxy.socks_port()}, std::nullopt, Millis{2000});
        send_all(s.fd(), bytes({0x05, 0x01, 0x00}));
        read_n(s.fd(), 2);
        send_all(s.fd(), socks_request(host, 443));
        require(read_n(s.fd(), 10).substr(0, 2) == bytes({0x05, 0x02}), fmt::format("SOCKS {} not refused", host));
    }
    proxy.stop(Millis{500});
    require(dialer.attempts.load() == 0, fmt::format("{} upstream dials for denied targets", dialer.attempts.load()));
    return {true, fmt::format("{} pairs, 0 disagreements; 9 denied requests, 0 dial attempts", tol::kFilterPairs)};
}

Outcome anomaly()
{
    ManualClock clock;
    EventBus events;
    TrafficMeter meter(MeterOptions{}, clock, nullptr, &events);
    QuotaPolicy q;
    q.mode = QuotaMode::fixed;
    q.per_client_quota_bytes = std::uint64_t{1} << 50;
    AnomalySettings settings;
    settings.multiplier = 3.0;
    settings.min_samples = 3;
    TrafficManager manager(q, FilterRuleSet{}, settings, clock, &events);
    manager.attach(meter);
    auto target = *TargetAddress::make("example.org", 443);

    // One minute of traffic at `mb_per_min`, ticking the manager every second.
    auto minute = [&](Ipv4Address ip, double mb_per_min) {
        auto s = meter.open_session(ip, ProxyProtocol::socks5, target, AdmissionDecision::allow());
        const auto per_second = static_cast<std::uint64_t>(mb_per_min * MB / 60.0);
        int alerts = 0;
        for (int i = 0; i < 60; ++i) {
            meter.record_transfer(s, Direction::down, per_second);
            clock.advance(Millis{1000});
            for (const auto& a : manager.tick(clock.now()))
                alerts += a.client_ip == ip;
        }
        meter.finalize_session(s);
        clock.advance(Millis{120'000}); // let the window drain between sessions
        manager.tick(clock.now());
        return alerts;
    };

    const Ipv4Address hot{192, 168, 43, 10}, warm{192, 168, 43, 11}, cold{192, 168, 43, 12};
    for (auto ip : {hot, warm})
        for (int i = 0; i < 3; ++i)
            require(minute(ip, 1.0) == 0, "alert while building the baseline");
    const double baseline_mb = manager.baseline(hot).baseline_rate * 60.0 / MB;
    require(std::abs(baseline_mb - 1.0) < 1e-3, fmt::format("baseline {:.4f} MB/min", baseline_mb));
    const int hot_alerts = minute(hot, 3.5);
    const int warm_alerts = minute(warm, 2.9);
    require(hot_alerts >= 1, "3.5 MB/min not flagged");
    require(warm_alerts == 0, "2.9 MB/min flagged");

    int cold_alerts = 0;
    for (int i = 0; i < 2; ++i)
        cold_alerts += minute(cold, 1.0);
    cold_alerts += minute(cold, 50.0);
    require(cold_alerts == 0, "client with < 3 sessions flagged");
    return {true, fmt::format("baseline {:.3f} MB/min (N=3): 3.5 MB/min flagged ({} alert), 2.9 not, cold start "
                              "(2 sessions, then 50 MB/min) not",
                              baseline_mb, hot_alerts)};
}

Outcome discovery()
{
    auto prober = std::make_shared<ScriptedProber>();
    auto cfg = loopback_config();
    cfg.probe_enabled = true;
    cfg.probe_interval = tol::kDiscoveryInterval;
    auto opts = loopback_options();
    opts.prober = prober;
    Gateway gw(cfg, opts);
    gw.start();

    std::mt19937 rng(99);
    std::set<Ipv4Address> reachable;
    double worst_ms = 0;
    for (int i = 0; i < tol::kDiscoveryTrials; ++i) {
        std::this_thread::sleep_for(Millis{rng() % 1000});
        const Ipv4Address ip{192, 168, 43, static_cast<std::uint8_t>(100 + i)};
        reachable.insert(ip);
        prober->set_responders(reachable);
        const auto t0 = std::chrono::steady_clock::now();
        bool online = false;
        while (seconds_since(t0) < 5.0) {
            auto c = gw.meter().find_client(ip.to_string());
            if (c && c->online) {
                online = true;
                break;
            }
            std::this_thread::sleep_for(Millis{2});
        }
        require(online, fmt::format("{} never came online", ip.to_string()));
        worst_ms = std::max(worst_ms, seconds_since(t0) * 1000.0);
    }
    gw.stop(Millis{200});
    const double limit = static_cast<double>((tol::kDiscoveryInterval + tol::kDiscoverySlack).count());
    require(worst_ms <= limit, fmt::format("worst latency {:.0f} ms > {:.0f} ms", worst_ms, limit));
    return {true, fmt::format("{} clients, worst join latency {:.0f} ms (interval {} ms + {} ms slack)",
                              tol::kDiscoveryTrials, worst_ms, tol::kDiscoveryInterval.count(),
                              tol::kDiscoverySlack.count())};
}

Outcome perf()
{
    TestOrigin origin;
    Gateway gw(loopback_config(), loopback_options());
    const auto run_start = system_clock().now();
    gw.start();
    RateLimitedLink link(tol::kPerfLinkBps, Endpoint{kLoopback, gw.socks_port()});

    auto tunnel = open_tunnel(link.endpoint(), ProxyProtocol::socks5, origin.endpoint(), Ipv4Address{127, 0, 0, 60},
                              std::nullopt);
    send_all(tunnel.fd(), "D");
    const auto transfer_start = system_clock().now();
    const auto t0 = std::chrono::steady_clock::now();
    std::uint64_t received = 0;
    std::vector<char> buf(64 * 1024);
    // Stop the transfer a little before the run ends so the last samples cover it fully.
    const auto transfer_for = tol::kPerfRun - Millis{2000};
    while (std::chrono::steady_clock::now() - t0 < transfer_for) {
        if (!wait_readable(tunnel.fd(), Millis{100}))
            continue;
        auto n = ::recv(tunnel.fd(), buf.data(), buf.size(), 0);
        require(n > 0, "transfer ended early");
        received += static_cast<std::uint64_t>(n);
    }
    const double transfer_secs = seconds_since(t0);
    const auto transfer_end = system_clock().now();
    send_all(tunnel.fd(), "S");
    const double truth_bps = static_cast<double>(received) * 8.0 / transfer_secs;

    std::this_thread::sleep_for(tol::kPerfRun - std::chrono::duration_cast<Millis>(system_clock().now() - run_start));
    const auto run_end = run_start + tol::kPerfRun;
    auto samples = gw.perf().samples_between(run_start, run_end);
    gw.stop(Millis{500});

    const int count = static_cast<int>(samples.size());
    require(std::abs(count - tol::kPerfSamplesExpected) <= tol::kPerfSamplesSlack,
            fmt::format("{} samples in {} s", count, tol::kPerfRun.count() / 1000));
    int judged = 0;
    double worst = 0;
    for (std::size_t i = 1; i < samples.size(); ++i) {
        // Only intervals lying entirely inside the transfer, skipping its first second of ramp-up.
        if (samples[i - 1].timestamp < transfer_start + Millis{1000} || samples[i].timestamp > transfer_end)
            continue;
        ++judged;
        worst = std::max(worst, std::abs(samples[i].throughput_down - truth_bps) / truth_bps);
    }
    require(judged >= 5, fmt::format("only {} samples inside the transfer", judged));
    require(worst <= tol::kPerfThroughput,
            fmt::format("throughput_down off by {:.1f}% (ground truth {:.2f} Mbit/s)", worst * 100, truth_bps / 1e6));
    return {true, fmt::format("{} samples in 60 s (12 +/- 2); {} in-transfer samples within {:.1f}% of {:.2f} Mbit/s "
                              "ground truth (limit 25%)",
                              count, judged, worst * 100, truth_bps / 1e6)};
}

struct WireFixture {
    const char* name;
    bool socks;
    bool auth;
    std::vector<std::string> steps; ///< alternating client hex, expected reply hex prefix
};

Outcome protocol()
{
    EventBus events;
    MeterOptions mo;
    mo.allow_loopback = true;
    TrafficMeter meter(mo, system_clock(), nullptr, &events);
    FilterRuleSet rules;
    rules.blocked_domains = {"blocked.example"};
    TrafficManager manager(QuotaPolicy{}, rules, AnomalySettings{}, system_clock(), &events);
    manager.attach(meter);
    CountingDialer dialer;
    ScriptedServer origin(0, "");
    std::uint16_t closed_port = 0;
    {
        auto l = listen_tcp(kLoopback, 0);
        closed_port = local_endpoint(l.fd()).port;
    }
    dialer.routes["unreachable.example"] = Endpoint{kLoopback, closed_port};

    ProxySettings open_settings;
    open_settings.connect_timeout = Millis{2000};
    ProxySettings auth_settings = open_settings;
    auth_settings.auth = Credentials{"user", "pass"};
    ProxyServer open_proxy(open_settings, meter, manager, dialer);
    ProxyServer auth_proxy(auth_settings, meter, manager, dialer);
    open_proxy.start(kLoopback, 0, 0);
    auth_proxy.start(kLoopback, 0, 0);

    const auto origin_port = fmt::format("{:04x}", origin.port());
    const auto fixtures = std::vector<WireFixture>{
        {"socks no-auth 05 00", true, false, {"050100", "0500"}},
        {"socks no acceptable method 05 ff", true, true, {"050100", "05ff"}},
        {"socks auth ok 01 00", true, true, {"050102", "0502", "0104" + hex("user") + "04" + hex("pass"), "0100"}},
        {"socks auth bad 01 01", true, true, {"050102", "0502", "0104" + hex("user") + "04" + hex("nope"), "0101"}},
        {"socks reply 00 (IPv4 atyp)", true, false, {"050100", "0500", "050100017f000001" + origin_port, "05000001"}},
        {"socks reply 02 ruleset", true, false, {"050100", "0500", hex(socks_request("blocked.example", 443)), "0502"}},
        {"socks reply 04 host unreachable", true, false,
         {"050100", "0500", hex(socks_request("no-such-host.invalid", 443)), "0504"}},
        {"socks reply 07 command", true, false, {"050100", "0500", "050200017f0000010050", "0507"}},
        {"socks reply 08 address type", true, false,
         {"050100", "0500", "05010004" + std::string(32, '0') + "0050", "0508"}},
        {"http 200 CONNECT", false, false,
         {hex(fmt::format("CONNECT 127.0.0.1:{} HTTP/1.1\r\n\r\n", origin.port())),
          hex("HTTP/1.1 200 Connection Established\r\n\r\n")}},
        {"http 400 malformed", false, false, {hex("\x01\x02garbage\r\n\r\n"), hex("HTTP/1.1 400 ")}},
        {"http 403 filtered", false, false,
         {hex("CONNECT www.blocked.example:443 HTTP/1.1\r\n\r\n"), hex("HTTP/1.1 403 ")}},
        {"http 407 challenge", false, true, {hex("CONNECT example.org:443 HTTP/1.1\r\n\r\n"),
                                              hex("HTTP/1.1 407 Proxy Authentication Required\r\n")}},
        {"http 502 upstream refused", false, false,
         {hex(fmt::format("CONNECT 127.0.0.1:{} HTTP/1.1\r\n\r\n", closed_port)), hex("HTTP/1.1 502 ")}},
    };
    dialer.routes["no-such-host.invalid"] = Endpoint{Ipv4Address{127, 0, 0, 1}, closed_port};

    int passed = 0;
    std::vector<std::string> failures;
    auto run_fixture = [&](const WireFixture& f) {
        auto& proxy = f.auth ? auth_proxy : open_proxy;
        auto s = connect_tcp({kLoopback, f.socks ? proxy.socks_port() : proxy.http_port()}, std::nullopt,
                             Millis{2000});
        for (std::size_t i = 0; i + 1 < f.steps.size(); i += 2) {
            send_all(s.fd(), unhex(f.steps[i]));
            const auto want = unhex(f.steps[i + 1]);
            const auto got = read_n(s.fd(), want.size(), Millis{3000});
            if (got != want)
                return fmt::format("{}: got {} want {}", f.name, hex(got), f.steps[i + 1]);
        }
        return std::string();
    };
    dialer.fail_with.reset();
    for (const auto& f : fixtures) {
        // Host-unreachable is the dialer's classification of a routing failure.
        if (std::string(f.name).find("unreachable") != std::string::npos)
            dialer.fail_with = DialError::Kind::unreachable;
        auto err = run_fixture(f);
        dialer.fail_with.reset();
        if (err.empty())
            ++passed;
        else
            failures.push_back(err);
    }

    // 429: quota-blocked client.
    manager.disconnect_client(kLoopback, "fixture");
    {
        auto s = connect_tcp({kLoopback, open_proxy.http_port()}, std::nullopt, Millis{2000});
        send_all(s.fd(), "CONNECT example.org:443 HTTP/1.1\r\n\r\n");
        if (read_head(s.fd()).starts_with("HTTP/1.1 429 Too Many Requests\r\n"))
            ++passed;
        else
            failures.push_back("http 429 quota");
    }
    open_proxy.stop(Millis{500});
    auth_proxy.stop(Millis{500});
    require(failures.empty(), fmt::format("{}", fmt::join(failures, "; ")));
    return {true, fmt::format("{} wire fixtures (SOCKS5 05 00/05 FF, 01 00/01 01, replies 00/02/04/07/08; HTTP "
                              "200/400/403/407/429/502)",
                              passed)};
}

/// Runs `args` as a child process; returns its pid.
pid_t spawn(const std::vector<std::string>& args)
{
    std::vector<char*> argv;
    for (const auto& a : args)
        argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    pid_t pid = ::fork();
    if (pid == 0) {
        ::execv(argv[0], argv.data());
        ::_exit(127);
    }
    return pid;
}

std::uint16_t free_port()
{
    auto s = listen_tcp(kLoopback, 0);
    return local_endpoint(s.fd()).port;
}

Outcome persistence()
{
    const auto store = temp_path("durability.db");
    std::filesystem::remove(store);
    std::filesystem::remove(store + "-wal");
    std::filesystem::remove(store + "-shm");
    const auto socks = free_port();
    const auto control = free_port();
    const auto cfg_path = temp_path("durability.conf");
    std::ofstream(cfg_path) << fmt::format(
        "listen_address = 127.0.0.1\nadvertise_address = 127.0.0.1\nallow_loopback_clients = true\n"
        "probe_enabled = false\negress.mode = system_default\nhttp_port = {}\nsocks_port = {}\n"
        "control_port = {}\nstore_path = {}\nquota.mode = fixed\nquota.per_client_bytes = 1000GB\n",
        free_port(), socks, control, store);

    pid_t pid = spawn({GATEWAY_BINARY, "--log-level", "warn", "run", "-c", cfg_path});
    require(pid > 0, "fork failed");
    httplib::Client api("127.0.0.1", control);
    api.set_connection_timeout(0, 200'000);
    bool up = false;
    for (int i = 0; i < 200 && !up; ++i) {
        auto r = api.Get("/api/status");
        up = r && r->status == 200;
        if (!up)
            std::this_thread::sleep_for(Millis{25});
    }
    if (!up) {
        ::kill(pid, SIGKILL);
        ::waitpid(pid, nullptr, 0);
        throw Failed("gateway child did not come up");
    }

    std::uint64_t truth_up = 0;
    std::uint64_t truth_down = 0;
    constexpr int kSessions = 6;
    auto live_sessions = [&] {
        auto r = api.Get("/api/clients");
        if (!r)
            return -1;
        int live = 0;
        for (const auto& c : json::parse(r->body)["clients"])
            live += c["live_sessions"].get<int>();
        return live;
    };
    for (int k = 0; k < kSessions; ++k) {
        const std::size_t up_n = 100 * static_cast<std::size_t>(k) + 7;
        const std::size_t down_n = 311 * static_cast<std::size_t>(k) + 1;
        ScriptedServer origin(up_n, pattern(down_n));
        auto s = connect_tcp({kLoopback, socks}, Ipv4Address{127, 0, 0, 70}, Millis{2000});
        send_all(s.fd(), bytes({0x05, 0x01, 0x00}));
        read_n(s.fd(), 2);
        send_all(s.fd(), socks_request("127.0.0.1", origin.port()));
        read_n(s.fd(), 10);
        send_all(s.fd(), pattern(up_n));
        truth_down += read_all(s.fd()).size();
        truth_up += origin.received().size();
    }
    for (int i = 0; i < 200 && live_sessions() != 0; ++i)
        std::this_thread::sleep_for(Millis{10});

    // One session still open at the moment of the kill.
    ScriptedServer hanging(1 << 20, "");
    auto open_session = connect_tcp({kLoopback, socks}, Ipv4Address{127, 0, 0, 70}, Millis{2000});
    send_all(open_session.fd(), bytes({0x05, 0x01, 0x00}));
    read_n(open_session.fd(), 2);
    send_all(open_session.fd(), socks_request("127.0.0.1", hanging.port()));
    read_n(open_session.fd(), 10);
    send_all(open_session.fd(), pattern(999));
    std::this_thread::sleep_for(Millis{100});

    ::kill(pid, SIGKILL);
    int wstatus = 0;
    ::waitpid(pid, &wstatus, 0);
    require(WIFSIGNALED(wstatus), "child was not killed");

    SqliteStore reopened(store);
    auto sessions = reopened.load_sessions();
    int finalized = 0;
    std::uint64_t stored_up = 0;
    std::uint64_t stored_down = 0;
    for (const auto& s : sessions) {
        if (!s.ended_at)
            continue;
        ++finalized;
        stored_up += s.bytes_up;
        stored_down += s.bytes_down;
    }
    require(finalized == kSessions, fmt::format("{} of {} finalized sessions survived", finalized, kSessions));
    require(stored_up == truth_up && stored_down == truth_down,
            fmt::format("store totals {}/{} vs ground truth {}/{}", stored_up, stored_down, truth_up, truth_down));
    return {true, fmt::format("SIGKILL with 1 live session: {}/{} finalized sessions present, totals {}/{} B "
                              "conserved",
                              finalized, kSessions, stored_up, stored_down)};
}

/// Informational: not one of the pass/fail criteria that decide the exit code.
std::string overhead_note()
{
    TestOrigin origin;
    Gateway gw(loopback_config(), loopback_options());
    gw.start();
    auto measure = [&](std::optional<Endpoint> proxy, std::optional<double> limit) {
        LoadTestPlan plan;
        plan.client_count = 1;
        plan.protocol = ProxyProtocol::http_connect;
        plan.duration_down = Millis{3000};
        plan.duration_up = Millis{3000};
        plan.repetitions = 3;
        plan.link_rate_limit = limit;
        return run_load_test(plan, proxy, origin.endpoint());
    };
    const Endpoint proxy{kLoopback, gw.http_port()};
    auto direct = measure(std::nullopt, std::nullopt);
    auto proxied = measure(proxy, std::nullopt);
    const double down = proxied.aggregate_down.mean / direct.aggregate_down.mean;
    const double up = proxied.aggregate_up.mean / direct.aggregate_up.mean;
    auto direct_lim = measure(std::nullopt, 100e6);
    auto proxied_lim = measure(proxy, 100e6);
    gw.stop(Millis{500});
    const bool ok = down >= tol::kOverheadFloor && up >= tol::kOverheadFloor;
    return fmt::format(
        "{}  proxy_overhead (note)  raw loopback 1 client: down {:.1f}% up {:.1f}% of direct "
        "({:.0f}/{:.0f} vs {:.0f}/{:.0f} Mbit/s; floor {:.0f}%); on a 100 Mbit/s link: down {:.1f}% up {:.1f}%",
        ok ? "PASS" : "FAIL", down * 100, up * 100, proxied.aggregate_down.mean / 1e6,
        proxied.aggregate_up.mean / 1e6, direct.aggregate_down.mean / 1e6, direct.aggregate_up.mean / 1e6,
        tol::kOverheadFloor * 100, proxied_lim.aggregate_down.mean / direct_lim.aggregate_down.mean * 100,
        proxied_lim.aggregate_up.mean / direct_lim.aggregate_up.mean * 100);
}

} // namespace

int main()
{
    spdlog::set_level(spdlog::level::err);
    std::signal(SIGPIPE, SIG_IGN);

    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"persistence_durability", persistence},
        {"accounting_exactness", accounting},
        {"quota_behavior", quota},
        {"filter_semantics", filter},
        {"anomaly_detection", anomaly},
        {"protocol_conformance", protocol},
        {"discovery_latency", discovery},
        {"jfi_oracle_and_fairness", jfi},
        {"perf_sampler", perf},
    };

    int failed = 0;
    for (const auto& [name, check] : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = check();
        } catch (const std::exception& e) {
            out = {false, e.what()};
        }
        failed += !out.pass;
        std::cout << fmt::format("{}  {}  {} [{:.1f}s]", out.pass ? "PASS" : "FAIL", name, out.detail,
                                 seconds_since(t0))
                  << std::endl;
    }

    try {
        std::cout << overhead_note() << std::endl;
    } catch (const std::exception& e) {
        std::cout << "FAIL  proxy_overhead (note)  " << e.what() << std::endl;
    }

    std::cout << fmt::format("{} of {} criteria passed", criteria.size() - static_cast<std::size_t>(failed),
                             criteria.size())
              << std::endl;
    return failed == 0 ? 0 : 1;
}
