//! Marching-cubes surface extraction over the allocated sparse volume, plus
//! binary PLY output.
//!
//! The classic 256-case tables are generated once at first use instead of
//! being pasted in as data: for every corner-sign pattern, each cube face is
//! solved by marching squares (ambiguous saddles always separate the inside
//! corners), the directed face segments are chained into closed loops, and
//! each loop is fan-triangulated. Face topology depends only on the face's
//! own sign pattern, so adjacent cells can never disagree along a shared
//! face and the resulting surface is crack-free.

use std::io::{BufWriter, Read, Write as IoWrite};
use std::path::Path;
use std::sync::OnceLock;

use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::hash::FastMap;
use crate::real::Real;
use crate::scene::Scene;

/// Cube corner offsets; corner index = the table bit it controls.
const CORNERS: [[i64; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// The 12 cube edges as corner pairs.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// (fixed axis, fixed value, u axis, v axis) with u x v = outward normal.
const FACES: [(usize, i64, usize, usize); 6] = [
    (2, 1, 0, 1),
    (2, 0, 1, 0),
    (0, 1, 1, 2),
    (0, 0, 2, 1),
    (1, 1, 2, 0),
    (1, 0, 0, 2),
];

struct McTables {
    /// Cube edges each case crosses; consumed by the structural checks.
    #[cfg_attr(not(test), allow(dead_code))]
    edge_mask: [u16; 256],
    tris: Vec<Vec<[u8; 3]>>,
}

fn corner_index(c: [i64; 3]) -> usize {
    CORNERS.iter().position(|k| *k == c).expect("cube corner")
}

fn edge_index(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
        .expect("cube edge")
}

fn generate_tables() -> McTables {
    let mut edge_mask = [0u16; 256];
    let mut tris = Vec::with_capacity(256);
    for case in 0..256usize {
        let inside = |c: usize| (case >> c) & 1 == 1;
        // directed boundary segments (from cube edge -> to cube edge)
        let mut segments: Vec<(usize, usize)> = Vec::new();
        for &(axis, val, uax, vax) in &FACES {
            let corner2d = |cu: i64, cv: i64| {
                let mut co = [0i64; 3];
                co[axis] = val;
                co[uax] = cu;
                co[vax] = cv;
                corner_index(co)
            };
            let quad = [corner2d(0, 0), corner2d(1, 0), corner2d(1, 1), corner2d(0, 1)];
            let pos = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
            // square edge i joins quad[i] and quad[(i+1)%4]
            let crossed: Vec<usize> = (0..4)
                .filter(|&i| inside(quad[i]) != inside(quad[(i + 1) % 4]))
                .collect();
            let mid = |i: usize| {
                [
                    (pos[i][0] + pos[(i + 1) % 4][0]) / 2.0,
                    (pos[i][1] + pos[(i + 1) % 4][1]) / 2.0,
                ]
            };
            let cube_edge = |i: usize| edge_index(quad[i], quad[(i + 1) % 4]);
            // push (a, b) oriented so `left` sits left of a->b
            let mut push = |a: usize, b: usize, left: [f64; 2]| {
                let (ma, mb) = (mid(a), mid(b));
                let d = [mb[0] - ma[0], mb[1] - ma[1]];
                let r = [left[0] - ma[0], left[1] - ma[1]];
                if d[0] * r[1] - d[1] * r[0] > 0.0 {
                    segments.push((cube_edge(a), cube_edge(b)));
                } else {
                    segments.push((cube_edge(b), cube_edge(a)));
                }
            };
            match crossed.len() {
                0 => {}
                2 => {
                    let refc = (0..4).find(|&i| inside(quad[i])).expect("inside corner");
                    push(crossed[0], crossed[1], pos[refc]);
                }
                4 => {
                    // saddle: cut each inside corner off individually
                    for k in 0..4 {
                        if inside(quad[k]) {
                            // square edges incident to corner k: k and (k+3)%4
                            push(k, (k + 3) % 4, pos[k]);
                        }
                    }
                }
                n => unreachable!("{n} crossings on a face"),
            }
        }
        // chain directed segments into loops
        let mut next = [usize::MAX; 12];
        let mut mask = 0u16;
        for &(f, t) in &segments {
            assert_eq!(next[f], usize::MAX, "case {case}: edge {f} leaves twice");
            next[f] = t;
            mask |= (1 << f) | (1 << t);
        }
        let mut case_tris = Vec::new();
        let mut visited = [false; 12];
        for start in 0..12 {
            if next[start] == usize::MAX || visited[start] {
                continue;
            }
            let mut cycle = vec![start];
            visited[start] = true;
            let mut cur = next[start];
            while cur != start {
                assert!(!visited[cur], "case {case}: segments do not chain");
                visited[cur] = true;
                cycle.push(cur);
                cur = next[cur];
            }
            assert!(cycle.len() >= 3, "case {case}: short loop");
            for i in 1..cycle.len() - 1 {
                case_tris.push([cycle[0] as u8, cycle[i] as u8, cycle[i + 1] as u8]);
            }
        }
        edge_mask[case] = mask;
        tris.push(case_tris);
    }
    McTables { edge_mask, tris }
}

fn tables() -> &'static McTables {
    static TABLES: OnceLock<McTables> = OnceLock::new();
    TABLES.get_or_init(generate_tables)
}

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    /// Per-vertex rgb in [0,1], parallel to `vertices`.
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn triangle_area(&self, t: [u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let x = u[1] * v[2] - u[2] * v[1];
        let y = u[2] * v[0] - u[0] * v[2];
        let z = u[0] * v[1] - u[1] * v[0];
        0.5 * (x * x + y * y + z * z).sqrt()
    }
}

/// March the zero level set of `sdf` over the given unit cells of an integer
/// lattice with the given spacing. Cells where any corner has no defined
/// value are skipped entirely, so no face ever extends into undefined space.
pub fn mesh_from_sdf<F: FnMut([f64; 3]) -> Option<f64>>(
    mut sdf: F,
    cells: &[[i64; 3]],
    spacing: f64,
) -> TriangleMesh {
    let tabs = tables();
    let mut corner_cache: FastMap<[i64; 3], Option<f64>> = FastMap::default();
    let mut edge_vertex: FastMap<([i64; 3], u8), u32> = FastMap::default();
    let mut mesh = TriangleMesh::default();

    for cell in cells {
        let mut vals = [0.0f64; 8];
        let mut defined = true;
        for (c, off) in CORNERS.iter().enumerate() {
            let key = [cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]];
            let v = *corner_cache.entry(key).or_insert_with(|| {
                sdf([
                    key[0] as f64 * spacing,
                    key[1] as f64 * spacing,
                    key[2] as f64 * spacing,
                ])
            });
            match v {
                Some(x) => vals[c] = x,
                None => {
                    defined = false;
                    break;
                }
            }
        }
        if !defined {
            continue;
        }
        let case = (0..8).fold(0usize, |m, c| m | ((vals[c] < 0.0) as usize) << c);
        if tabs.tris[case].is_empty() {
            continue;
        }
        let mut vertex_on_edge = |e: usize| -> u32 {
            let (a, b) = EDGES[e];
            let (pa, pb) = (CORNERS[a], CORNERS[b]);
            let axis = (0..3).find(|&k| pa[k] != pb[k]).unwrap() as u8;
            // key by the lower lattice endpoint so neighbors share vertices
            let (lo, hi, vlo, vhi) = if pa[axis as usize] < pb[axis as usize] {
                (pa, pb, vals[a], vals[b])
            } else {
                (pb, pa, vals[b], vals[a])
            };
            let key = (
                [cell[0] + lo[0], cell[1] + lo[1], cell[2] + lo[2]],
                axis,
            );
            if let Some(&id) = edge_vertex.get(&key) {
                return id;
            }
            let t = vlo / (vlo - vhi);
            let mut p = [0.0; 3];
            for k in 0..3 {
                let a = (cell[k] + lo[k]) as f64;
                let b = (cell[k] + hi[k]) as f64;
                p[k] = (a + t * (b - a)) * spacing;
            }
            let id = mesh.vertices.len() as u32;
            mesh.vertices.push(p);
            edge_vertex.insert(key, id);
            id
        };
        for tri in &tabs.tris[case] {
            let ids = [
                vertex_on_edge(tri[0] as usize),
                vertex_on_edge(tri[1] as usize),
                vertex_on_edge(tri[2] as usize),
            ];
            if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                mesh.triangles.push(ids);
            }
        }
    }
    mesh
}

/// Extract the scene's surface at the given grid spacing (snapped so an
/// integer number of cells tiles each voxel). Colors come from the
/// appearance planes at each vertex.
pub fn extract_mesh<T: Real>(
    store: &ParamStore<T>,
    scene: &Scene<T>,
    resolution: T,
) -> TriangleMesh {
    let h = scene.volume.voxel_size.to_f64();
    let f = (h / resolution.to_f64()).round().max(1.0) as i64;
    let spacing = h / f as f64;
    let mut keys: Vec<_> = scene.volume.voxel_keys().collect();
    keys.sort_unstable();
    let mut cells = Vec::with_capacity(keys.len() * (f * f * f) as usize);
    for k in keys {
        for dx in 0..f {
            for dy in 0..f {
                for dz in 0..f {
                    cells.push([
                        k[0] as i64 * f + dx,
                        k[1] as i64 * f + dy,
                        k[2] as i64 * f + dz,
                    ]);
                }
            }
        }
    }
    let mut mesh = mesh_from_sdf(
        |p| {
            scene
                .sdf_at(store, [T::from_f64(p[0]), T::from_f64(p[1]), T::from_f64(p[2])])
                .map(|s| s.to_f64())
        },
        &cells,
        spacing,
    );
    let colors = mesh
        .vertices
        .iter()
        .map(|v| {
            let c = scene.color_at(
                store,
                [T::from_f64(v[0]), T::from_f64(v[1]), T::from_f64(v[2])],
            );
            [c[0].to_f64(), c[1].to_f64(), c[2].to_f64()]
        })
        .collect();
    mesh.colors = Some(colors);
    mesh
}

/// Binary little-endian PLY with optional uchar vertex colors.
pub fn save_ply(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if mesh.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str(&format!("element face {}\n", mesh.triangles.len()));
    header.push_str("property list uchar int vertex_indices\nend_header\n");
    w.write_all(header.as_bytes())?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for x in v {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
        if let Some(cols) = &mesh.colors {
            for ch in cols[i] {
                w.write_all(&[(ch.clamp(0.0, 1.0) * 255.0).round() as u8])?;
            }
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for i in t {
            w.write_all(&(*i as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back the PLY layout `save_ply` emits.
pub fn load_ply(path: &Path) -> Result<TriangleMesh> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| Error::Mesh(format!("{}: {m}", path.display()));
    let header_end = buf
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| bad("no end_header"))?
        + 11;
    let header = std::str::from_utf8(&buf[..header_end]).map_err(|_| bad("non-utf8 header"))?;
    if !header.starts_with("ply\nformat binary_little_endian 1.0\n") {
        return Err(bad("not binary little-endian ply"));
    }
    let mut n_verts = 0usize;
    let mut n_faces = 0usize;
    let mut has_color = false;
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            n_verts = rest.parse().map_err(|_| bad("bad vertex count"))?;
        } else if let Some(rest) = line.strip_prefix("element face ") {
            n_faces = rest.parse().map_err(|_| bad("bad face count"))?;
        } else if line == "property uchar red" {
            has_color = true;
        }
    }
    let stride = 12 + if has_color { 3 } else { 0 };
    let need = header_end + n_verts * stride + n_faces * 13;
    if buf.len() < need {
        return Err(bad("truncated body"));
    }
    let mut vertices = Vec::with_capacity(n_verts);
    let mut colors = has_color.then(|| Vec::with_capacity(n_verts));
    let mut pos = header_end;
    for _ in 0..n_verts {
        let mut v = [0.0; 3];
        for x in &mut v {
            *x = f32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as f64;
            pos += 4;
        }
        vertices.push(v);
        if let Some(cols) = &mut colors {
            let mut c = [0.0; 3];
            for ch in &mut c {
                *ch = buf[pos] as f64 / 255.0;
                pos += 1;
            }
            cols.push(c);
        }
    }
    let mut triangles = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        if buf[pos] != 3 {
            return Err(bad("non-triangle face"));
        }
        pos += 1;
        let mut t = [0u32; 3];
        for i in &mut t {
            *i = i32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as u32;
            pos += 4;
        }
        if t.iter().any(|&i| i as usize >= n_verts) {
            return Err(bad("face index out of range"));
        }
        triangles.push(t);
    }
    Ok(TriangleMesh {
        vertices,
        triangles,
        colors,
    })
}
