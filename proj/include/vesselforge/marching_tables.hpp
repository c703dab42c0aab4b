#pragma once

// Classic 256-case marching cubes tables (Lorensen/Cline via Bourke).
// Cube vertex v sits at offsets (x + dx[v], y + dy[v], z + dz[v]); edge e
// connects kEdgeVerts[e][0] -> kEdgeVerts[e][1].

namespace vf::mesh::mc {

extern const int kEdgeTable[256];
extern const int kTriTable[256][16];

inline constexpr int kVertOffset[8][3] = {
    {0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
    {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1},
};

inline constexpr int kEdgeVerts[12][2] = {
    {0, 1}, {1, 2}, {2, 3}, {3, 0},
    {4, 5}, {5, 6}, {6, 7}, {7, 4},
    {0, 4}, {1, 5}, {2, 6}, {3, 7},
};

}  // namespace vf::mesh::mc
