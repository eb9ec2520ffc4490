// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

namespace merid {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Args>
[[noreturn]] inline void fail(const char* fmt, Args... args) {
    char buf[1024];
    std::snprintf(buf, sizeof(buf), fmt, args...);
    throw Error(buf);
}

inline void require(bool cond, const std::string& msg) {
    if (!cond)
        throw Error(msg);
}

} // namespace merid
