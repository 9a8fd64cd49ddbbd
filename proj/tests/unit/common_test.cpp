#include "gateway/common.hpp"
#include "gateway/ring_buffer.hpp"

#include <gtest/gtest.h>

using namespace gateway;

TEST(Duration, ParsesUnits)
{
    EXPECT_EQ(parse_duration("250ms"), Millis{250});
    EXPECT_EQ(parse_duration("10s"), Millis{10'000});
    EXPECT_EQ(parse_duration("5m"), Millis{300'000});
    EXPECT_EQ(parse_duration("2h"), Millis{7'200'000});
    EXPECT_EQ(parse_duration("7"), Millis{7'000});
    EXPECT_EQ(parse_duration(" 3s "), Millis{3'000});
    EXPECT_FALSE(parse_duration(""));
    EXPECT_FALSE(parse_duration("ms"));
    EXPECT_FALSE(parse_duration("5 fortnights"));
    EXPECT_FALSE(parse_duration("-5s"));
}

TEST(Duration, FormatRoundTrips)
{
    for (auto d : {Millis{250}, Millis{10'000}, Millis{300'000}, Millis{7'200'000}, Millis{1'500}})
        EXPECT_EQ(parse_duration(format_duration(d)), d) << format_duration(d);
}

TEST(ByteCount, DecimalSuffixes)
{
    EXPECT_EQ(parse_byte_count("300MB"), 300'000'000u);
    EXPECT_EQ(parse_byte_count("50 MB"), 50'000'000u);
    EXPECT_EQ(parse_byte_count("1GB"), 1'000'000'000u);
    EXPECT_EQ(parse_byte_count("1024"), 1024u);
    EXPECT_EQ(parse_byte_count("2kb"), 2'000u);
    EXPECT_FALSE(parse_byte_count("12XB"));
    EXPECT_FALSE(parse_byte_count("99999999999999999999GB"));
}

TEST(Ipv4, ParseAndFormat)
{
    auto a = Ipv4Address::parse("192.168.43.17");
    ASSERT_TRUE(a);
    EXPECT_EQ(a->to_string(), "192.168.43.17");
    EXPECT_EQ(a->value(), (192u << 24) | (168u << 16) | (43u << 8) | 17u);
    for (const char* bad : {"", "1.2.3", "1.2.3.4.5", "256.1.1.1", "a.b.c.d", "1..2.3", " 1.2.3.4", "01.2.3.4x"})
        EXPECT_FALSE(Ipv4Address::parse(bad)) << bad;
    EXPECT_TRUE(Ipv4Address::parse("127.0.0.1")->is_loopback());
    EXPECT_TRUE(Ipv4Address::parse("0.0.0.0")->is_any());
}

TEST(Cidr, ContainsAndHosts)
{
    auto c = Cidr::parse("192.168.43.0/24");
    ASSERT_TRUE(c);
    EXPECT_TRUE(c->contains(*Ipv4Address::parse("192.168.43.17")));
    EXPECT_FALSE(c->contains(*Ipv4Address::parse("192.168.44.1")));
    EXPECT_FALSE(c->contains(*Ipv4Address::parse("8.8.8.8")));
    auto hosts = c->hosts();
    ASSERT_EQ(hosts.size(), 254u);
    EXPECT_EQ(hosts.front().to_string(), "192.168.43.1");
    EXPECT_EQ(hosts.back().to_string(), "192.168.43.254");
    EXPECT_EQ(c->to_string(), "192.168.43.0/24");

    auto masked = Cidr::parse("10.1.2.3/16");
    ASSERT_TRUE(masked);
    EXPECT_EQ(masked->network().to_string(), "10.1.0.0");
    EXPECT_EQ(Cidr::parse("10.0.0.1/32")->hosts().size(), 1u);
    EXPECT_FALSE(Cidr::parse("10.0.0.0/33"));
    EXPECT_EQ(Cidr::parse("10.0.0.7")->prefix(), 32);
    EXPECT_FALSE(Cidr::parse("10.0.0/8"));
}

TEST(TargetAddress, Normalizes)
{
    auto t = TargetAddress::make("Example.ORG.", 443);
    ASSERT_TRUE(t);
    EXPECT_EQ(t->host, "example.org");
    EXPECT_EQ(t->to_string(), "example.org:443");
    EXPECT_FALSE(TargetAddress::make("", 80));
    EXPECT_FALSE(TargetAddress::make("example.org", 0));
    EXPECT_FALSE(TargetAddress::make("example.org", 70000));
    EXPECT_TRUE(TargetAddress::make("10.0.0.1", 80)->is_ip_literal());
}

TEST(Enums, RoundTrip)
{
    for (auto p : {ProxyProtocol::http_forward, ProxyProtocol::http_connect, ProxyProtocol::socks5})
        EXPECT_EQ(parse_protocol(to_string(p)), p);
    for (auto v : {Verdict::allow, Verdict::deny_quota, Verdict::deny_filter_domain, Verdict::deny_filter_port,
                   Verdict::deny_auth})
        EXPECT_EQ(parse_verdict(to_string(v)), v);
}

TEST(Timestamp, IsoFormat)
{
    auto t = from_unix_millis(1'714'564'800'123);
    EXPECT_EQ(format_timestamp(t), "2024-05-01T12:00:00.123Z");
    EXPECT_EQ(to_unix_millis(t), 1'714'564'800'123);
}

TEST(RingBuffer, OverwritesOldest)
{
    RingBuffer<int> r(3);
    for (int i = 1; i <= 5; ++i)
        r.push(i);
    ASSERT_EQ(r.size(), 3u);
    EXPECT_EQ(r[0], 3);
    EXPECT_EQ(r.back(), 5);
    auto even = r.collect([](int v) { return v % 2 == 0; });
    EXPECT_EQ(even, std::vector<int>{4});
    EXPECT_THROW(RingBuffer<int>(0), std::invalid_argument);
}

TEST(SplitList, TrimsAndDropsEmpty)
{
    EXPECT_EQ(split_list(" a, b ,,c "), (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_TRUE(split_list("").empty());
}
