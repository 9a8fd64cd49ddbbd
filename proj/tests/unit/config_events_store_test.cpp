#include "gateway/config.hpp"
#include "gateway/events.hpp"
#include "gateway/store.hpp"

#include "support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <sqlite3.h>

#include <filesystem>
#include <fstream>

using namespace gateway;
using namespace gateway::testing;

TEST(Config, DefaultsFromEmptyDocument)
{
    auto cfg = parse_config("# nothing\n\n");
    EXPECT_EQ(cfg, GatewayConfig{});
    EXPECT_EQ(cfg.http_port, 8080);
    EXPECT_EQ(cfg.perf_sample_interval, Millis{5000});
    EXPECT_EQ(cfg.quota_policy.cooldown, Millis{300'000});
    EXPECT_DOUBLE_EQ(cfg.anomaly.multiplier, 3.0);
}

TEST(Config, ParsesKeys)
{
    auto cfg = parse_config(R"(
listen_address = 192.168.43.1
http_port = 3128
socks_port = 1081
control_port = 9091
auth.username = share
auth.password = "p@ss word"
egress.mode = bind_address
egress.value = 10.8.0.2
subnet = 192.168.43.0/24
probe_interval = 2s
quota.mode = fixed
quota.per_client_bytes = 50MB
quota.cooldown = 90s
filter.blocked_domains = YouTube.com, example.org
filter.blocked_ports = 25,6881
anomaly.multiplier = 2.5
)");
    EXPECT_EQ(cfg.listen_address.to_string(), "192.168.43.1");
    EXPECT_EQ(cfg.http_port, 3128);
    ASSERT_TRUE(cfg.auth);
    EXPECT_EQ(cfg.auth->password, "p@ss word");
    EXPECT_EQ(cfg.egress, EgressSelector::bind_to(Ipv4Address{10, 8, 0, 2}));
    EXPECT_EQ(cfg.probe_interval, Millis{2000});
    EXPECT_EQ(cfg.quota_policy.mode, QuotaMode::fixed);
    EXPECT_EQ(cfg.quota_policy.per_client_quota_bytes, 50'000'000u);
    EXPECT_TRUE(cfg.filter_rules.blocked_domains.contains("youtube.com"));
    EXPECT_TRUE(cfg.filter_rules.blocked_ports.contains(6881));
    EXPECT_DOUBLE_EQ(cfg.anomaly.multiplier, 2.5);
}

TEST(Config, RenderRoundTrip)
{
    auto cfg = parse_config("auth.username = u\nauth.password = p\nquota.total_bytes = 300MB\n"
                            "filter.blocked_domains = a.com\nadvertise_address = 192.168.43.1\n");
    EXPECT_EQ(parse_config(render_config(cfg)), cfg);
    EXPECT_EQ(parse_config(render_config(GatewayConfig{})), GatewayConfig{});
}

TEST(Config, ErrorsNameTheKey)
{
    auto key_of = [](const std::string& text) -> std::string {
        try {
            parse_config(text);
        } catch (const ConfigError& e) {
            return e.key();
        }
        return "<no error>";
    };
    EXPECT_EQ(key_of("mystery = 1\n"), "mystery");
    EXPECT_EQ(key_of("http_port = 0\n"), "http_port");
    EXPECT_EQ(key_of("http_port = abc\n"), "http_port");
    EXPECT_EQ(key_of("subnet = 10.0.0.0/99\n"), "subnet");
    EXPECT_EQ(key_of("probe_interval = soon\n"), "probe_interval");
    EXPECT_EQ(key_of("quota.mode = dynamic\nquota.total_bytes = 0\n"), "quota.total_bytes");
    EXPECT_EQ(key_of("http_port = 1080\n"), "http_port,socks_port");
    EXPECT_EQ(key_of("auth.username = only\n"), "auth.password");
    EXPECT_EQ(key_of("egress.mode = named_interface\n"), "egress.value");
    EXPECT_EQ(key_of("filter.enabled_presets = ghost\n"), "filter.enabled_presets");
    EXPECT_EQ(key_of("http_port = 8081\nnot a pair\n"), "line 2");
}

TEST(Config, LoadsPresetsFile)
{
    auto cfg = parse_config(fmt::format("filter.presets_file = {}/data/presets.json\n"
                                        "filter.enabled_presets = video_streaming\n",
                                        GATEWAY_SOURCE_DIR));
    EXPECT_TRUE(domain_blocked("www.youtube.com", cfg.filter_rules));
}

TEST(Config, ExampleFileIsValid)
{
    auto text = [] {
        std::ifstream in(std::string(GATEWAY_SOURCE_DIR) + "/data/gateway.conf.example");
        return std::string(std::istreambuf_iterator<char>(in), {});
    }();
    ASSERT_FALSE(text.empty());
    // The example references the preset file relative to the repository root.
    auto old = std::filesystem::current_path();
    std::filesystem::current_path(GATEWAY_SOURCE_DIR);
    EXPECT_NO_THROW(parse_config(text));
    std::filesystem::current_path(old);
}

TEST(EventBus, SequenceAndReplay)
{
    EventBus bus(8);
    for (int i = 0; i < 5; ++i)
        bus.publish(EventType::perf_sample, {{"i", i}});
    auto all = bus.read_after(0);
    ASSERT_EQ(all.events.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i)
        EXPECT_EQ(all.events[i].seq, i + 1);
    auto tail = bus.read_after(3);
    ASSERT_EQ(tail.events.size(), 2u);
    EXPECT_EQ(tail.events[0].seq, 4u);
    EXPECT_FALSE(tail.overflow);
}

TEST(EventBus, OverflowForLaggingReader)
{
    EventBus bus(4);
    for (int i = 0; i < 10; ++i)
        bus.publish(EventType::perf_sample, {});
    EXPECT_TRUE(bus.read_after(2).overflow);
    EXPECT_FALSE(bus.read_after(6).overflow);
    EXPECT_EQ(bus.read_after(6).events.size(), 4u);
}

TEST(EventBus, WaitAndClose)
{
    EventBus bus;
    std::thread producer([&] {
        std::this_thread::sleep_for(Millis{50});
        bus.publish(EventType::block, {{"client_ip", "192.168.43.2"}});
    });
    auto r = bus.read_after(0, Millis{2000});
    producer.join();
    ASSERT_EQ(r.events.size(), 1u);
    auto j = r.events[0].to_json();
    EXPECT_EQ(j["type"], "block");
    EXPECT_EQ(j["client_ip"], "192.168.43.2");
    EXPECT_EQ(j["seq"], 1);
    bus.close();
    EXPECT_TRUE(bus.read_after(1, Millis{1000}).closed);
}

TEST(EventBus, ReplayIsGapFree)
{
    EventBus bus(1000);
    for (int i = 0; i < 600; ++i)
        bus.publish(EventType::session_opened, {{"i", i}});
    std::vector<std::uint64_t> seen;
    std::uint64_t cursor = 0;
    for (;;) {
        auto r = bus.read_after(cursor, Millis::zero(), 37);
        if (r.events.empty())
            break;
        for (const auto& e : r.events)
            seen.push_back(e.seq);
        cursor = r.events.back().seq;
    }
    ASSERT_EQ(seen.size(), 600u);
    for (std::size_t i = 0; i < seen.size(); ++i)
        EXPECT_EQ(seen[i], i + 1);
}

namespace {

SessionRecord sample_session(const std::string& id, std::uint64_t up, std::uint64_t down)
{
    SessionRecord s;
    s.session_id = id;
    s.client_ip = Ipv4Address{192, 168, 43, 17};
    s.protocol = ProxyProtocol::socks5;
    s.target = TargetAddress::make("example.org", 443);
    s.started_at = from_unix_millis(1'700'000'000'000);
    s.ended_at = from_unix_millis(1'700'000'005'000);
    s.bytes_up = up;
    s.bytes_down = down;
    return s;
}

} // namespace

TEST(SqliteStore, RoundTripAndIdempotentRows)
{
    auto path = temp_path("roundtrip.db");
    std::filesystem::remove(path);
    {
        SqliteStore store(path);
        ClientRecord c;
        c.ip = Ipv4Address{192, 168, 43, 17};
        c.identifier = "Client-1";
        c.first_seen = from_unix_millis(1'700'000'000'000);
        store.put_client(c);
        store.put_session(sample_session("s1", 357, 1024));
        store.put_session(sample_session("s1", 1, 1));
        auto denied = sample_session("s2", 0, 0);
        denied.target.reset();
        denied.verdict = AdmissionDecision::deny(Verdict::deny_auth, "bad password");
        store.put_session(denied);
    }
    SqliteStore reopened(path);
    auto sessions = reopened.load_sessions();
    ASSERT_EQ(sessions.size(), 2u);
    auto s1 = std::find_if(sessions.begin(), sessions.end(), [](auto& s) { return s.session_id == "s1"; });
    ASSERT_NE(s1, sessions.end());
    EXPECT_EQ(*s1, sample_session("s1", 357, 1024));
    auto s2 = std::find_if(sessions.begin(), sessions.end(), [](auto& s) { return s.session_id == "s2"; });
    EXPECT_FALSE(s2->target);
    EXPECT_EQ(s2->verdict.verdict, Verdict::deny_auth);
    auto clients = reopened.load_clients();
    ASSERT_EQ(clients.size(), 1u);
    EXPECT_EQ(clients[0].identifier, "Client-1");

    auto totals = aggregate_store(reopened);
    ASSERT_EQ(totals.size(), 1u);
    EXPECT_EQ(totals[0].bytes_up, 357u);
    EXPECT_EQ(totals[0].bytes_down, 1024u);
    EXPECT_EQ(totals[0].session_count, 2u);
}

TEST(SqliteStore, RejectsNewerSchema)
{
    auto path = temp_path("future.db");
    std::filesystem::remove(path);
    {
        sqlite3* db = nullptr;
        ASSERT_EQ(sqlite3_open(path.c_str(), &db), SQLITE_OK);
        sqlite3_exec(db, "PRAGMA user_version = 99", nullptr, nullptr, nullptr);
        sqlite3_close(db);
    }
    try {
        SqliteStore store(path);
        FAIL() << "expected StoreError";
    } catch (const StoreError& e) {
        EXPECT_NE(std::string(e.what()).find(path), std::string::npos);
    }
}

TEST(SqliteStore, UnopenablePath)
{
    EXPECT_THROW(SqliteStore("/nonexistent-dir/x/y.db"), StoreError);
}
