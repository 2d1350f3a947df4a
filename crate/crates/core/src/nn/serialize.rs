//! `CHARTNET1` binary container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"CHARTNET1"
//! u32                 number of layer sizes L
//! u32 x L             layer sizes, input first
//! per layer:
//!   f64 x (out * in)  weights, row-major (out x in)
//!   f64 x out         bias
//! ```

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use super::{ChartNet, Dense, LayerSpec};
use crate::error::{Error, Result};

pub const CHARTNET_MAGIC: &[u8; 9] = b"CHARTNET1";

pub fn write_chartnet<W: Write>(net: &ChartNet, mut out: W) -> std::io::Result<()> {
    out.write_all(CHARTNET_MAGIC)?;
    let sizes = net.spec().sizes();
    out.write_all(&(sizes.len() as u32).to_le_bytes())?;
    for &s in sizes {
        out.write_all(&(s as u32).to_le_bytes())?;
    }
    for layer in net.layers() {
        for w in layer.weights.iter() {
            out.write_all(&w.to_le_bytes())?;
        }
        for b in layer.bias.iter() {
            out.write_all(&b.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_chartnet<R: Read>(mut input: R) -> Result<ChartNet> {
    let bad = |m: String| Error::invalid(format!("malformed CHARTNET1 data: {m}"));
    let mut magic = [0u8; 9];
    input
        .read_exact(&mut magic)
        .map_err(|e| bad(e.to_string()))?;
    if &magic != CHARTNET_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let count = read_u32(&mut input).map_err(|e| bad(e.to_string()))? as usize;
    if !(2..=64).contains(&count) {
        return Err(bad(format!("implausible layer count {count}")));
    }
    let sizes = (0..count)
        .map(|_| read_u32(&mut input).map(|s| s as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| bad(e.to_string()))?;
    let spec = LayerSpec::new(sizes)?;
    let mut layers = Vec::with_capacity(spec.num_layers());
    for w in spec.sizes().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = read_f64s(&mut input, fan_in * fan_out).map_err(|e| bad(e.to_string()))?;
        let bias = read_f64s(&mut input, fan_out).map_err(|e| bad(e.to_string()))?;
        layers.push(Dense {
            weights: Array2::from_shape_vec((fan_out, fan_in), weights)
                .map_err(|e| bad(e.to_string()))?,
            bias: Array1::from(bias),
        });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    ChartNet::from_layers(spec, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = ChartNet::init(LayerSpec::chart(vec![2, 7, 5, 3]).unwrap(), 77);
        let mut buf = Vec::new();
        write_chartnet(&net, &mut buf).unwrap();
        assert_eq!(&buf[..9], b"CHARTNET1");
        assert_eq!(u32::from_le_bytes(buf[9..13].try_into().unwrap()), 4);
        let expected_len = 9 + 4 + 4 * 4 + 8 * net.parameter_count();
        assert_eq!(buf.len(), expected_len);
        let back = read_chartnet(&buf[..]).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let net = ChartNet::init(LayerSpec::chart(vec![2, 3]).unwrap(), 1);
        let mut buf = Vec::new();
        write_chartnet(&net, &mut buf).unwrap();
        assert!(read_chartnet(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_chartnet(&extra[..]).is_err());
        let mut magic = buf;
        magic[0] = b'X';
        assert!(read_chartnet(&magic[..]).is_err());
    }
}
