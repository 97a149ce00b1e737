#pragma once

#include "fedimit/codec.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace testing {

inline std::string fixture(const std::string& name) {
    return fedimit::codec::read_file(std::string(FEDIMIT_FIXTURES) + "/" + name);
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("fedimit-test-" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testing
