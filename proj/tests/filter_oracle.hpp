#pragma once

#include "gateway/filter.hpp"

#include <fmt/format.h>

#include <random>
#include <string>
#include <vector>

// Independent reference for dot-boundary suffix matching. Deliberately naive: plain string
// comparisons over every rule, no label walking, no shared helpers with the implementation.
namespace gateway::filter_oracle {

inline bool looks_like_ipv4(const std::string& s)
{
    int dots = 0;
    int digits = 0;
    for (char c : s) {
        if (c == '.') {
            if (digits == 0)
                return false;
            ++dots;
            digits = 0;
        } else if (c >= '0' && c <= '9') {
            if (++digits > 3)
                return false;
        } else {
            return false;
        }
    }
    if (dots != 3 || digits == 0)
        return false;
    std::size_t start = 0;
    for (int i = 0; i < 4; ++i) {
        auto end = s.find('.', start);
        auto part = s.substr(start, end == std::string::npos ? std::string::npos : end - start);
        if (std::stoi(part) > 255)
            return false;
        start = end + 1;
    }
    return true;
}

inline bool naive_blocked(const std::string& host, const std::vector<std::string>& rules)
{
    const bool ip = looks_like_ipv4(host);
    for (const auto& r : rules) {
        if (host == r)
            return true;
        if (ip)
            continue;
        const std::string dotted = "." + r;
        if (host.size() > dotted.size() && host.compare(host.size() - dotted.size(), dotted.size(), dotted) == 0)
            return true;
    }
    return false;
}

/// Random (ruleset, host) pairs biased toward near-misses; returns descriptions of disagreements.
inline std::vector<std::string> compare_random(std::mt19937_64& rng, int pairs)
{
    static const std::vector<std::string> labels = {"a", "b", "ab", "ba", "com", "example", "xample", "m",
                                                    "www", "cdn", "tube", "youtube", "1", "10", "0"};
    auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
    auto domain = [&](int max_labels) {
        int n = 1 + static_cast<int>(pick(static_cast<std::size_t>(max_labels)));
        std::string d;
        for (int i = 0; i < n; ++i) {
            if (i)
                d += '.';
            d += labels[pick(labels.size())];
        }
        return d;
    };
    auto ip = [&] {
        return fmt::format("{}.{}.{}.{}", pick(3) == 0 ? 10 : pick(256), pick(2), pick(3), pick(12));
    };

    std::vector<std::string> mismatches;
    for (int i = 0; i < pairs; ++i) {
        FilterRuleSet rules;
        std::vector<std::string> flat;
        const std::size_t rule_count = pick(6);
        for (std::size_t k = 0; k < rule_count; ++k) {
            auto d = pick(5) == 0 ? ip() : domain(3);
            rules.blocked_domains.insert(d);
        }
        if (pick(3) == 0) {
            std::vector<std::string> preset;
            for (std::size_t k = 0; k < 1 + pick(3); ++k)
                preset.push_back(domain(2));
            rules.presets["p"] = preset;
            if (pick(2) == 0) {
                rules.enabled_presets.insert("p");
                flat.insert(flat.end(), preset.begin(), preset.end());
            }
        }
        flat.insert(flat.end(), rules.blocked_domains.begin(), rules.blocked_domains.end());

        std::string host;
        const auto mode = pick(5);
        if (mode == 0 || flat.empty()) {
            host = domain(4);
        } else if (mode == 1) {
            host = ip();
        } else {
            const auto& base = flat[pick(flat.size())];
            switch (pick(4)) {
            case 0: host = base; break;
            case 1: host = domain(2) + "." + base; break;
            case 2: host = labels[pick(labels.size())] + base; break; // glued, no dot
            default: host = base.substr(pick(base.size())); break;   // truncated
            }
            if (host.empty() || host.front() == '.' || host.back() == '.')
                host = domain(3);
        }

        const bool expected = naive_blocked(host, flat);
        const bool actual = domain_blocked(host, rules);
        if (expected != actual) {
            std::string list;
            for (const auto& r : flat)
                list += r + " ";
            mismatches.push_back(
                fmt::format("host '{}' rules [{}]: oracle {} implementation {}", host, list, expected, actual));
        }
    }
    return mismatches;
}

} // namespace gateway::filter_oracle
