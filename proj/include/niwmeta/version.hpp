#pragma once

namespace niwmeta {

inline constexpr const char* kLibraryVersion = "0.1.0";
// Bumped whenever model.json or run.json change shape.
inline constexpr int kArtifactFormat = 1;

}  // namespace niwmeta
