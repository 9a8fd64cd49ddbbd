#include "gateway/common.hpp"

#include <arpa/inet.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <ctime>

#include <fmt/format.h>

namespace gateway {

const Clock& system_clock()
{
    static const SystemClock clock;
    return clock;
}

std::int64_t to_unix_millis(Timestamp t)
{
    return std::chrono::duration_cast<Millis>(t.time_since_epoch()).count();
}

Timestamp from_unix_millis(std::int64_t ms)
{
    return Timestamp{Millis{ms}};
}

std::string format_timestamp(Timestamp t)
{
    const auto ms = to_unix_millis(t);
    std::time_t secs = static_cast<std::time_t>(ms / 1000);
    int frac = static_cast<int>(ms % 1000);
    if (frac < 0) {
        frac += 1000;
        --secs;
    }
    std::tm tm{};
    gmtime_r(&secs, &tm);
    return fmt::format("{:04}-{:02}-{:02}T{:02}:{:02}:{:02}.{:03}Z", tm.tm_year + 1900, tm.tm_mon + 1,
                       tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, frac);
}

namespace {

template <typename T>
std::optional<T> parse_number(std::string_view s)
{
    T value{};
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (ec != std::errc{} || ptr != end)
        return std::nullopt;
    return value;
}

std::pair<std::string_view, std::string_view> split_number_suffix(std::string_view s)
{
    std::size_t i = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])))
        ++i;
    return {s.substr(0, i), trim(s.substr(i))};
}

} // namespace

std::optional<Millis> parse_duration(std::string_view text)
{
    auto [digits, suffix] = split_number_suffix(trim(text));
    if (digits.empty())
        return std::nullopt;
    auto n = parse_number<std::int64_t>(digits);
    if (!n)
        return std::nullopt;
    const std::string unit = to_lower(suffix);
    if (unit.empty() || unit == "s")
        return Millis{*n * 1000};
    if (unit == "ms")
        return Millis{*n};
    if (unit == "m" || unit == "min")
        return Millis{*n * 60'000};
    if (unit == "h")
        return Millis{*n * 3'600'000};
    return std::nullopt;
}

std::string format_duration(Millis d)
{
    const auto ms = d.count();
    if (ms % 3'600'000 == 0 && ms != 0)
        return fmt::format("{}h", ms / 3'600'000);
    if (ms % 60'000 == 0 && ms != 0)
        return fmt::format("{}m", ms / 60'000);
    if (ms % 1000 == 0)
        return fmt::format("{}s", ms / 1000);
    return fmt::format("{}ms", ms);
}

std::optional<std::uint64_t> parse_byte_count(std::string_view text)
{
    auto [digits, suffix] = split_number_suffix(trim(text));
    if (digits.empty())
        return std::nullopt;
    auto n = parse_number<std::uint64_t>(digits);
    if (!n)
        return std::nullopt;
    const std::string unit = to_lower(suffix);
    std::uint64_t mult = 0;
    if (unit.empty() || unit == "b")
        mult = 1;
    else if (unit == "kb")
        mult = 1'000;
    else if (unit == "mb")
        mult = 1'000'000;
    else if (unit == "gb")
        mult = 1'000'000'000;
    else
        return std::nullopt;
    if (*n > UINT64_MAX / mult)
        return std::nullopt;
    return *n * mult;
}

std::string to_lower(std::string_view s)
{
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::string_view trim(std::string_view s)
{
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())))
        s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())))
        s.remove_suffix(1);
    return s;
}

std::vector<std::string> split_list(std::string_view s, char sep)
{
    std::vector<std::string> out;
    while (!s.empty()) {
        auto pos = s.find(sep);
        auto item = trim(s.substr(0, pos));
        if (!item.empty())
            out.emplace_back(item);
        if (pos == std::string_view::npos)
            break;
        s.remove_prefix(pos + 1);
    }
    return out;
}

std::optional<Ipv4Address> Ipv4Address::parse(std::string_view text)
{
    // inet_pton accepts only dotted-quad, which is the form we want.
    if (text.size() > 15)
        return std::nullopt;
    std::string buf(text);
    in_addr addr{};
    if (inet_pton(AF_INET, buf.c_str(), &addr) != 1)
        return std::nullopt;
    return Ipv4Address{ntohl(addr.s_addr)};
}

std::string Ipv4Address::to_string() const
{
    return fmt::format("{}.{}.{}.{}", value_ >> 24, (value_ >> 16) & 0xff, (value_ >> 8) & 0xff, value_ & 0xff);
}

Cidr::Cidr(Ipv4Address network, int prefix) : prefix_(prefix)
{
    if (prefix < 0 || prefix > 32)
        throw std::invalid_argument("prefix out of range");
    network_ = Ipv4Address{network.value() & netmask()};
}

std::optional<Cidr> Cidr::parse(std::string_view text)
{
    text = trim(text);
    auto slash = text.find('/');
    auto ip = Ipv4Address::parse(text.substr(0, slash));
    if (!ip)
        return std::nullopt;
    int prefix = 32;
    if (slash != std::string_view::npos) {
        auto p = parse_number<int>(text.substr(slash + 1));
        if (!p || *p < 0 || *p > 32)
            return std::nullopt;
        prefix = *p;
    }
    return Cidr{*ip, prefix};
}

std::uint32_t Cidr::netmask() const
{
    return prefix_ == 0 ? 0u : ~std::uint32_t{0} << (32 - prefix_);
}

bool Cidr::contains(Ipv4Address ip) const
{
    return (ip.value() & netmask()) == network_.value();
}

std::uint64_t Cidr::host_count() const
{
    const std::uint64_t size = std::uint64_t{1} << (32 - prefix_);
    return prefix_ >= 31 ? size : size - 2;
}

std::vector<Ipv4Address> Cidr::hosts() const
{
    std::vector<Ipv4Address> out;
    const std::uint64_t size = std::uint64_t{1} << (32 - prefix_);
    std::uint64_t first = 0;
    std::uint64_t last = size;
    if (prefix_ < 31) {
        first = 1;
        last = size - 1;
    }
    out.reserve(static_cast<std::size_t>(last - first));
    for (std::uint64_t i = first; i < last; ++i)
        out.emplace_back(static_cast<std::uint32_t>(network_.value() + i));
    return out;
}

std::string Cidr::to_string() const
{
    return fmt::format("{}/{}", network_.to_string(), prefix_);
}

std::string_view to_string(ProxyProtocol p)
{
    switch (p) {
    case ProxyProtocol::http_forward: return "http_forward";
    case ProxyProtocol::http_connect: return "http_connect";
    case ProxyProtocol::socks5: return "socks5";
    }
    return "unknown";
}

std::optional<ProxyProtocol> parse_protocol(std::string_view s)
{
    if (s == "http_forward")
        return ProxyProtocol::http_forward;
    if (s == "http_connect")
        return ProxyProtocol::http_connect;
    if (s == "socks5")
        return ProxyProtocol::socks5;
    return std::nullopt;
}

std::optional<TargetAddress> TargetAddress::make(std::string_view host, std::uint32_t port)
{
    host = trim(host);
    if (!host.empty() && host.back() == '.')
        host.remove_suffix(1);
    if (host.empty() || port == 0 || port > 65535)
        return std::nullopt;
    for (char c : host) {
        if (std::isspace(static_cast<unsigned char>(c)) || c == '/' || c == '@')
            return std::nullopt;
    }
    return TargetAddress{to_lower(host), static_cast<std::uint16_t>(port)};
}

std::string TargetAddress::to_string() const
{
    return fmt::format("{}:{}", host, port);
}

std::string_view to_string(Verdict v)
{
    switch (v) {
    case Verdict::allow: return "allow";
    case Verdict::deny_quota: return "deny_quota";
    case Verdict::deny_filter_domain: return "deny_filter_domain";
    case Verdict::deny_filter_port: return "deny_filter_port";
    case Verdict::deny_auth: return "deny_auth";
    }
    return "unknown";
}

std::optional<Verdict> parse_verdict(std::string_view s)
{
    for (auto v : {Verdict::allow, Verdict::deny_quota, Verdict::deny_filter_domain, Verdict::deny_filter_port,
                   Verdict::deny_auth}) {
        if (to_string(v) == s)
            return v;
    }
    return std::nullopt;
}

AdmissionDecision AdmissionDecision::deny(Verdict v, std::string detail)
{
    if (v == Verdict::allow)
        throw std::invalid_argument("deny() requires a deny verdict");
    if (detail.empty())
        detail = std::string(to_string(v));
    return {v, std::move(detail)};
}

} // namespace gateway
