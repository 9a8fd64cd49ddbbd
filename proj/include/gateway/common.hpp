#pragma once

#include <atomic>
#include <chrono>
#include <compare>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gateway {

using Timestamp = std::chrono::system_clock::time_point;
using Millis = std::chrono::milliseconds;

/// Source of "now" for every time-dependent decision. Tests substitute ManualClock.
class Clock {
public:
    virtual ~Clock() = default;
    virtual Timestamp now() const = 0;
};

class SystemClock final : public Clock {
public:
    Timestamp now() const override { return std::chrono::system_clock::now(); }
};

class ManualClock final : public Clock {
public:
    explicit ManualClock(Timestamp start = Timestamp{std::chrono::seconds{1'700'000'000}})
        : now_ms_(start.time_since_epoch() / Millis{1}) {}

    Timestamp now() const override { return Timestamp{Millis{now_ms_.load()}}; }
    void advance(Millis d) { now_ms_ += d.count(); }
    void set(Timestamp t) { now_ms_ = t.time_since_epoch() / Millis{1}; }

private:
    std::atomic<std::int64_t> now_ms_;
};

const Clock& system_clock();

std::int64_t to_unix_millis(Timestamp t);
Timestamp from_unix_millis(std::int64_t ms);
/// ISO-8601 UTC with millisecond precision, e.g. 2024-05-01T12:00:00.123Z
std::string format_timestamp(Timestamp t);

/// Parses "250ms", "10s", "5m", "2h" (a bare integer is seconds).
std::optional<Millis> parse_duration(std::string_view text);
std::string format_duration(Millis d);

/// Parses a byte count with optional decimal suffix: "300MB", "50 MB", "1GB", "1024".
std::optional<std::uint64_t> parse_byte_count(std::string_view text);

std::string to_lower(std::string_view s);
std::string_view trim(std::string_view s);
std::vector<std::string> split_list(std::string_view s, char sep = ',');

class Ipv4Address {
public:
    constexpr Ipv4Address() = default;
    constexpr explicit Ipv4Address(std::uint32_t host_order) : value_(host_order) {}
    constexpr Ipv4Address(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d)
        : value_((std::uint32_t{a} << 24) | (std::uint32_t{b} << 16) | (std::uint32_t{c} << 8) | d) {}

    static std::optional<Ipv4Address> parse(std::string_view text);

    constexpr std::uint32_t value() const { return value_; }
    constexpr bool is_loopback() const { return (value_ >> 24) == 127; }
    constexpr bool is_any() const { return value_ == 0; }
    std::string to_string() const;

    friend constexpr auto operator<=>(Ipv4Address, Ipv4Address) = default;

private:
    std::uint32_t value_ = 0;
};

class Cidr {
public:
    Cidr() = default;
    Cidr(Ipv4Address network, int prefix);

    static std::optional<Cidr> parse(std::string_view text);

    Ipv4Address network() const { return network_; }
    int prefix() const { return prefix_; }
    std::uint32_t netmask() const;
    bool contains(Ipv4Address ip) const;
    /// Usable host addresses (network and broadcast excluded for prefixes < 31).
    std::vector<Ipv4Address> hosts() const;
    std::uint64_t host_count() const;
    std::string to_string() const;

    friend bool operator==(const Cidr&, const Cidr&) = default;

private:
    Ipv4Address network_{};
    int prefix_ = 32;
};

enum class ProxyProtocol { http_forward, http_connect, socks5 };

std::string_view to_string(ProxyProtocol p);
std::optional<ProxyProtocol> parse_protocol(std::string_view s);

/// Destination requested by a client. Domain names are lowercase without trailing dot.
struct TargetAddress {
    std::string host;
    std::uint16_t port = 0;

    /// Normalizes and validates; nullopt for an empty host or port 0.
    static std::optional<TargetAddress> make(std::string_view host, std::uint32_t port);

    bool is_ip_literal() const { return Ipv4Address::parse(host).has_value(); }
    std::string to_string() const;

    friend bool operator==(const TargetAddress&, const TargetAddress&) = default;
};

enum class Verdict { allow, deny_quota, deny_filter_domain, deny_filter_port, deny_auth };

std::string_view to_string(Verdict v);
std::optional<Verdict> parse_verdict(std::string_view s);

struct AdmissionDecision {
    Verdict verdict = Verdict::allow;
    std::string detail;

    static AdmissionDecision allow() { return {}; }
    static AdmissionDecision deny(Verdict v, std::string detail);

    bool allowed() const { return verdict == Verdict::allow; }
    friend bool operator==(const AdmissionDecision&, const AdmissionDecision&) = default;
};

enum class Direction { up, down };

struct Credentials {
    std::string username;
    std::string password;

    friend bool operator==(const Credentials&, const Credentials&) = default;
};

class NotFound : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace gateway
