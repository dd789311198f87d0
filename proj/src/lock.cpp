#include "dgan/lock.hpp"

#include "dgan/error.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <string>

namespace dgan {

DirectoryLock::DirectoryLock(const std::filesystem::path& dir) : path_(lock_path(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST) {
            throw DataError(dir.string() + " is locked by another process (remove " + path_.string() +
                            " if no other process is running)");
        }
        throw DataError("cannot lock " + dir.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

DirectoryLock::~DirectoryLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
}

bool DirectoryLock::is_locked(const std::filesystem::path& dir) { return std::filesystem::exists(lock_path(dir)); }

} // namespace dgan
