//! OBJ subset reader/writer.
//!
//! Supported statements: `v x y z`, `vt u v`, `f a/at b/bt c/ct` (or plain
//! `f a b c`), comments, and blank lines. Indices are 1-based in the file.
//! Floats are written as `{:.8e}`, which is 9 significant digits and round
//! trips every f32 exactly.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::mesh::Mesh;
use crate::{Error, Result, Vec2, Vec3};

pub fn write_obj<W: Write>(writer: &mut W, mesh: &Mesh) -> Result<()> {
    let mut buf = String::new();
    for v in &mesh.vertices {
        writeln!(buf, "v {:.8e} {:.8e} {:.8e}", v.x, v.y, v.z).unwrap();
    }
    for t in &mesh.uvs {
        writeln!(buf, "vt {:.8e} {:.8e}", t.x, t.y).unwrap();
    }
    let has_uvs = !mesh.face_uvs.is_empty();
    for (i, f) in mesh.faces.iter().enumerate() {
        if has_uvs {
            let t = mesh.face_uvs[i];
            writeln!(
                buf,
                "f {}/{} {}/{} {}/{}",
                f[0] + 1,
                t[0] + 1,
                f[1] + 1,
                t[1] + 1,
                f[2] + 1,
                t[2] + 1
            )
            .unwrap();
        } else {
            writeln!(buf, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
        }
    }
    writer.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn save_obj<P: AsRef<Path>>(path: P, mesh: &Mesh) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_obj(&mut file, mesh)
}

pub fn read_obj<R: Read>(reader: R, path_label: &str) -> Result<Mesh> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path_label.to_string(),
        line,
        msg,
    };

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut uvs: Vec<Vec2> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut face_uvs: Vec<[u32; 3]> = Vec::new();

    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let tag = tokens.next().unwrap();
        match tag {
            "v" => {
                let mut coords = [0.0f32; 3];
                for c in &mut coords {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| parse_err(lineno, "vertex needs 3 coordinates".into()))?;
                    *c = tok
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad float '{tok}'")))?;
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            "vt" => {
                let mut coords = [0.0f32; 2];
                for c in &mut coords {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| parse_err(lineno, "uv needs 2 coordinates".into()))?;
                    *c = tok
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad float '{tok}'")))?;
                }
                uvs.push(Vec2::new(coords[0], coords[1]));
            }
            "f" => {
                let mut vs = [0u32; 3];
                let mut ts = [0u32; 3];
                let mut n_uv = 0;
                for k in 0..3 {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| parse_err(lineno, "face needs 3 corners".into()))?;
                    let mut parts = tok.split('/');
                    let vtok = parts.next().unwrap();
                    let vi: i64 = vtok
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad index '{vtok}'")))?;
                    if vi < 1 || vi as usize > vertices.len() {
                        return Err(parse_err(
                            lineno,
                            format!("vertex index {vi} out of range 1..={}", vertices.len()),
                        ));
                    }
                    vs[k] = (vi - 1) as u32;
                    if let Some(ttok) = parts.next() {
                        if !ttok.is_empty() {
                            let ti: i64 = ttok
                                .parse()
                                .map_err(|_| parse_err(lineno, format!("bad index '{ttok}'")))?;
                            if ti < 1 || ti as usize > uvs.len() {
                                return Err(parse_err(
                                    lineno,
                                    format!("uv index {ti} out of range 1..={}", uvs.len()),
                                ));
                            }
                            ts[k] = (ti - 1) as u32;
                            n_uv += 1;
                        }
                    }
                }
                if tokens.next().is_some() {
                    return Err(parse_err(
                        lineno,
                        "only triangular faces are supported".into(),
                    ));
                }
                match n_uv {
                    0 => {}
                    3 => face_uvs.push(ts),
                    _ => {
                        return Err(parse_err(
                            lineno,
                            "face mixes corners with and without uvs".into(),
                        ))
                    }
                }
                faces.push(vs);
            }
            // Unknown statements (vn, usemtl, o, g, s, mtllib) are skipped.
            _ => {}
        }
    }

    if !face_uvs.is_empty() && face_uvs.len() != faces.len() {
        return Err(Error::Parse {
            path: path_label.to_string(),
            line: 0,
            msg: "some faces have uvs and some do not".into(),
        });
    }
    Mesh::new(vertices, faces, uvs, face_uvs)
}

pub fn load_obj<P: AsRef<Path>>(path: P) -> Result<Mesh> {
    let label = path.as_ref().display().to_string();
    let file = std::fs::File::open(&path)?;
    read_obj(file, &label)
}
