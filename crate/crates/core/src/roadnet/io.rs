//! Line-oriented text formats.
//!
//! Network:
//! ```text
//! #nodes N #edges E
//! N <id> <lng> <lat>
//! E <id> <from> <to> <length>
//! ```
//! Trips: `<trip_id>;<node:ts>,<node:ts>,...` (integer seconds).
//! Queries: `<query_id>;<lng_o>,<lat_o>;<lng_d>,<lat_d>;<departure_ts>`.
//!
//! Floats are written with 9 significant digits.

use std::fs;
use std::io::Write;
use std::path::Path as FsPath;
use std::str::FromStr;

use super::{Edge, Node, OdtQuery, Point, Result, RoadNetwork, RoadnetError, Trip};

/// `x` printed like C's `%.9g`.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let (mant, e) = sci.split_at(sci.find('e').unwrap());
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}{e}")
    }
}

/// The value a float takes after a save/load cycle.
pub fn round_sig9(x: f64) -> f64 {
    fmt_sig9(x).parse().unwrap_or(x)
}

fn field<T: FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| RoadnetError::Parse {
        line,
        msg: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| RoadnetError::Parse {
        line,
        msg: format!("cannot parse {what} from `{tok}`"),
    })
}

fn no_trailing<'a>(mut it: impl Iterator<Item = &'a str>, line: usize) -> Result<()> {
    match it.next() {
        Some(extra) => Err(RoadnetError::Parse {
            line,
            msg: format!("unexpected trailing field `{extra}`"),
        }),
        None => Ok(()),
    }
}

pub fn write_network<W: Write>(net: &RoadNetwork, mut w: W) -> Result<()> {
    writeln!(w, "#nodes {} #edges {}", net.node_count(), net.edge_count())?;
    for n in net.nodes() {
        writeln!(w, "N {} {} {}", n.id, fmt_sig9(n.pos.lng), fmt_sig9(n.pos.lat))?;
    }
    for e in net.edges() {
        writeln!(w, "E {} {} {} {}", e.id, e.from, e.to, fmt_sig9(e.length))?;
    }
    Ok(())
}

pub fn parse_network(text: &str) -> Result<RoadNetwork> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hl, header) = lines.next().ok_or(RoadnetError::Parse {
        line: 1,
        msg: "empty network file".into(),
    })?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("#nodes") {
        return Err(RoadnetError::Parse {
            line: hl,
            msg: "expected header `#nodes N #edges E`".into(),
        });
    }
    let n_nodes: usize = field(toks.next(), hl, "node count")?;
    if toks.next() != Some("#edges") {
        return Err(RoadnetError::Parse {
            line: hl,
            msg: "expected `#edges` in header".into(),
        });
    }
    let n_edges: usize = field(toks.next(), hl, "edge count")?;
    no_trailing(toks, hl)?;

    let mut nodes = Vec::with_capacity(n_nodes);
    let mut edges = Vec::with_capacity(n_edges);
    for (ln, l) in lines {
        let mut toks = l.split_whitespace();
        match toks.next() {
            Some("N") => {
                if !edges.is_empty() {
                    return Err(RoadnetError::Parse {
                        line: ln,
                        msg: "node record after edge records".into(),
                    });
                }
                let id = field(toks.next(), ln, "node id")?;
                let lng = field(toks.next(), ln, "lng")?;
                let lat = field(toks.next(), ln, "lat")?;
                no_trailing(toks, ln)?;
                nodes.push(Node { id, pos: Point { lng, lat } });
            }
            Some("E") => {
                let id = field(toks.next(), ln, "edge id")?;
                let from = field(toks.next(), ln, "from node")?;
                let to = field(toks.next(), ln, "to node")?;
                let length = field(toks.next(), ln, "length")?;
                no_trailing(toks, ln)?;
                edges.push(Edge { id, from, to, length });
            }
            Some(other) => {
                return Err(RoadnetError::Parse {
                    line: ln,
                    msg: format!("unknown record type `{other}`"),
                })
            }
            None => unreachable!(),
        }
    }
    if nodes.len() != n_nodes || edges.len() != n_edges {
        return Err(RoadnetError::Validation(format!(
            "header declares {n_nodes} nodes / {n_edges} edges, file has {} / {}",
            nodes.len(),
            edges.len()
        )));
    }
    RoadNetwork::new(nodes, edges)
}

pub fn save_network(net: &RoadNetwork, path: impl AsRef<FsPath>) -> Result<()> {
    let mut buf = Vec::new();
    write_network(net, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_network(path: impl AsRef<FsPath>) -> Result<RoadNetwork> {
    parse_network(&fs::read_to_string(path)?)
}

pub fn write_trips<W: Write>(trips: &[Trip], mut w: W) -> Result<()> {
    for t in trips {
        let pts: Vec<String> = t.points.iter().map(|(v, ts)| format!("{v}:{ts}")).collect();
        writeln!(w, "{};{}", t.id, pts.join(","))?;
    }
    Ok(())
}

pub fn parse_trips(text: &str) -> Result<Vec<Trip>> {
    let mut trips = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let ln = i + 1;
        let l = l.trim();
        if l.is_empty() {
            continue;
        }
        let (id, rest) = l.split_once(';').ok_or_else(|| RoadnetError::Parse {
            line: ln,
            msg: "expected `<trip_id>;<points>`".into(),
        })?;
        let id = field(Some(id), ln, "trip id")?;
        let mut points = Vec::new();
        for p in rest.split(',') {
            let (v, ts) = p.split_once(':').ok_or_else(|| RoadnetError::Parse {
                line: ln,
                msg: format!("expected `node:ts`, found `{p}`"),
            })?;
            points.push((field(Some(v), ln, "node")?, field(Some(ts), ln, "timestamp")?));
        }
        let trip = Trip::new(id, points).map_err(|e| RoadnetError::Parse {
            line: ln,
            msg: e.to_string(),
        })?;
        trips.push(trip);
    }
    Ok(trips)
}

pub fn save_trips(trips: &[Trip], path: impl AsRef<FsPath>) -> Result<()> {
    let mut buf = Vec::new();
    write_trips(trips, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_trips(path: impl AsRef<FsPath>) -> Result<Vec<Trip>> {
    parse_trips(&fs::read_to_string(path)?)
}

pub fn write_queries<W: Write>(queries: &[OdtQuery], mut w: W) -> Result<()> {
    for q in queries {
        writeln!(
            w,
            "{};{},{};{},{};{}",
            q.id,
            fmt_sig9(q.origin.lng),
            fmt_sig9(q.origin.lat),
            fmt_sig9(q.destination.lng),
            fmt_sig9(q.destination.lat),
            q.departure_time
        )?;
    }
    Ok(())
}

fn parse_point(s: &str, ln: usize, what: &str) -> Result<Point> {
    let (a, b) = s.split_once(',').ok_or_else(|| RoadnetError::Parse {
        line: ln,
        msg: format!("expected `lng,lat` for {what}"),
    })?;
    Ok(Point {
        lng: field(Some(a.trim()), ln, "lng")?,
        lat: field(Some(b.trim()), ln, "lat")?,
    })
}

pub fn parse_queries(text: &str) -> Result<Vec<OdtQuery>> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let ln = i + 1;
        let l = l.trim();
        if l.is_empty() {
            continue;
        }
        let parts: Vec<&str> = l.split(';').collect();
        if parts.len() != 4 {
            return Err(RoadnetError::Parse {
                line: ln,
                msg: format!("expected 4 `;`-separated fields, found {}", parts.len()),
            });
        }
        out.push(OdtQuery {
            id: field(Some(parts[0]), ln, "query id")?,
            origin: parse_point(parts[1], ln, "origin")?,
            destination: parse_point(parts[2], ln, "destination")?,
            departure_time: field(Some(parts[3]), ln, "departure time")?,
        });
    }
    Ok(out)
}

pub fn save_queries(queries: &[OdtQuery], path: impl AsRef<FsPath>) -> Result<()> {
    let mut buf = Vec::new();
    write_queries(queries, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_queries(path: impl AsRef<FsPath>) -> Result<Vec<OdtQuery>> {
    parse_queries(&fs::read_to_string(path)?)
}
