//! NET1 checkpoints.
//!
//! ```text
//! "NET1"
//! u32 x4   architecture (kind, channels, width, levels)
//! u32      graph word count, then graph words (node list)
//! u64      parameter count, then f32 parameters
//! u8       1 if Adam state follows: u64 step, f32 m[n], f32 v[n]
//! ```
//! All little-endian. The graph is stored explicitly so custom graphs reload too.

use std::path::Path;

use super::arch::ArchSpec;
use super::graph::{Graph, Node, Op};
use super::{AdamState, Network, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NET1";

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { kind: "NET1", reason: reason.into() }
}

fn encode_graph(g: &Graph) -> Vec<u32> {
    let mut w = vec![g.in_channels as u32, g.nodes.len() as u32];
    for n in &g.nodes {
        let (code, fields): (u32, Vec<usize>) = match n.op {
            Op::Input => (0, vec![]),
            Op::Conv { cin, cout, kernel, stride } => (1, vec![cin, cout, kernel, stride]),
            Op::GroupNorm { channels, groups } => (2, vec![channels, groups]),
            Op::Silu => (3, vec![]),
            Op::Upsample => (4, vec![]),
            Op::Add => (5, vec![]),
            Op::TimeBias { channels } => (6, vec![channels]),
            Op::GlobalPool => (7, vec![]),
            Op::Dense { inputs, outputs } => (8, vec![inputs, outputs]),
        };
        w.push(code);
        w.extend(fields.iter().map(|&f| f as u32));
        w.push(n.zero_init as u32);
        w.push(n.inputs.len() as u32);
        w.extend(n.inputs.iter().map(|&i| i as u32));
    }
    w
}

fn decode_graph(w: &[u32]) -> Result<Graph> {
    let mut it = w.iter().map(|&v| v as usize);
    let mut next = || it.next().ok_or_else(|| bad("graph description truncated"));
    let in_channels = next()?;
    let count = next()?;
    let mut nodes = Vec::with_capacity(count.min(4096));
    let mut offset = 0;
    for _ in 0..count {
        let op = match next()? {
            0 => Op::Input,
            1 => Op::Conv { cin: next()?, cout: next()?, kernel: next()?, stride: next()? },
            2 => Op::GroupNorm { channels: next()?, groups: next()? },
            3 => Op::Silu,
            4 => Op::Upsample,
            5 => Op::Add,
            6 => Op::TimeBias { channels: next()? },
            7 => Op::GlobalPool,
            8 => Op::Dense { inputs: next()?, outputs: next()? },
            c => return Err(bad(format!("unknown op code {c}"))),
        };
        let zero_init = next()? != 0;
        let ninp = next()?;
        let inputs = (0..ninp).map(|_| next()).collect::<Result<Vec<_>>>()?;
        nodes.push(Node { op, inputs, param_offset: offset, zero_init });
        offset += op.param_count();
    }
    let g = Graph { in_channels, nodes };
    g.validate().map_err(|e| bad(e.to_string()))?;
    Ok(g)
}

/// Streaming encoder/decoder so other containers can embed networks.
pub struct NetCodec;

impl NetCodec {
    pub fn encode(net: &Network, with_adam: bool, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        for w in net.spec().to_words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let gw = encode_graph(net.graph());
        out.extend_from_slice(&(gw.len() as u32).to_le_bytes());
        gw.iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
        out.extend_from_slice(&(net.param_count() as u64).to_le_bytes());
        let put = |out: &mut Vec<u8>, xs: &[Real]| xs.iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes()));
        put(out, net.params());
        if with_adam {
            out.push(1);
            out.extend_from_slice(&net.adam().step.to_le_bytes());
            put(out, &net.adam().m);
            put(out, &net.adam().v);
        } else {
            out.push(0);
        }
    }

    /// Decode one network from the front of `bytes`; returns it and the number
    /// of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Network, usize)> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("wrong magic"));
        }
        let aw = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let spec = ArchSpec::from_words(aw).ok_or_else(|| bad("unknown architecture id"))?;
        let nw = r.u32()? as usize;
        if nw > bytes.len() / 4 {
            return Err(bad("graph description truncated"));
        }
        let words = (0..nw).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let graph = decode_graph(&words)?;
        let n = r.u64()? as usize;
        if n != graph.param_count() {
            return Err(bad(format!("parameter count {n} does not match architecture ({})", graph.param_count())));
        }
        let params = r.reals(n)?;
        let mut net = Network::with_params(spec, graph, params)?;
        match r.take(1)?[0] {
            0 => {}
            1 => {
                let step = r.u64()?;
                let m = r.reals(n)?;
                let v = r.reals(n)?;
                net.set_adam(AdamState { m, v, step })?;
            }
            f => return Err(bad(format!("bad adam flag {f}"))),
        }
        Ok((net, r.pos))
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(bad("truncated"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn reals(&mut self, n: usize) -> Result<Vec<Real>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real).collect())
    }
}

pub fn write_net(path: impl AsRef<Path>, net: &Network, with_adam: bool) -> Result<()> {
    let mut buf = Vec::new();
    NetCodec::encode(net, with_adam, &mut buf);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_net(path: impl AsRef<Path>) -> Result<Network> {
    let bytes = std::fs::read(path)?;
    let (net, used) = NetCodec::decode(&bytes)?;
    if used != bytes.len() {
        return Err(bad("trailing bytes after network"));
    }
    Ok(net)
}
