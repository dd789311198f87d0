#pragma once

#include <filesystem>

namespace dgan {

// Exclusive ownership of a directory through a `.lock` file created with
// O_EXCL. Throws DataError when another owner holds it.
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

    static std::filesystem::path lock_path(const std::filesystem::path& dir) { return dir / ".lock"; }
    static bool is_locked(const std::filesystem::path& dir);

private:
    std::filesystem::path path_;
};

} // namespace dgan
