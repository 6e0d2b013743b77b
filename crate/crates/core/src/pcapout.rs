//! Classic pcap export of test cases wrapped in GSMTAP over UDP/IPv4/Ethernet,
//! so stock dissectors decode them as signaling messages.

use std::io::Write;

use thiserror::Error;

pub const MAX_PAYLOAD: usize = 9000;
pub const GSMTAP_PORT: u16 = 4729;
pub const GSMTAP_VERSION: u8 = 2;
pub const GSMTAP_HDR_WORDS: u8 = 4;
pub const GSMTAP_TYPE_LTE_RRC: u8 = 0x0d;

const GLOBAL_HDR: usize = 24;
const REC_HDR: usize = 16;
const ETH: usize = 14;
const IPV4: usize = 20;
const UDP: usize = 8;
const GSMTAP: usize = 16;
const ENCAP: usize = ETH + IPV4 + UDP + GSMTAP;
const MAGIC: u32 = 0xa1b2_c3d4;
const LINKTYPE_ETHERNET: u32 = 1;
const SNAPLEN: u32 = 65535;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("payload {index} is {len} bytes, limit is {MAX_PAYLOAD}")]
    Oversize { index: usize, len: usize },
    #[error("malformed capture at offset {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// LTE RRC channel sub-types.
pub const LTE_RRC_CHANNELS: [(&str, u8); 10] = [
    ("dl-ccch", 0),
    ("dl-dcch", 1),
    ("ul-ccch", 2),
    ("ul-dcch", 3),
    ("bcch-bch", 4),
    ("bcch-dl-sch", 5),
    ("pcch", 6),
    ("mcch", 7),
    ("bcch-bch-mbms", 8),
    ("bcch-dl-sch-br", 9),
];

/// Resolves a channel name or a numeric code.
pub fn channel_code(s: &str) -> Option<u8> {
    let s = s.to_ascii_lowercase().replace('_', "-");
    LTE_RRC_CHANNELS.iter().find(|(n, _)| *n == s).map(|&(_, c)| c).or_else(|| s.parse().ok())
}

/// GSMTAP header fields that vary per export. `sub_type` is the channel
/// code and has no default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GsmtapMeta {
    pub kind: u8,
    pub sub_type: u8,
    pub arfcn: u16,
    pub frame_number: u32,
}

impl GsmtapMeta {
    pub fn lte_rrc(sub_type: u8) -> GsmtapMeta {
        GsmtapMeta { kind: GSMTAP_TYPE_LTE_RRC, sub_type, arfcn: 0, frame_number: 0 }
    }
}

/// Ones-complement sum over 16-bit big-endian words.
pub fn ipv4_checksum(hdr: &[u8]) -> u16 {
    let mut sum: u32 = hdr.chunks(2).map(|c| u32::from(c[0]) << 8 | u32::from(*c.get(1).unwrap_or(&0))).sum();
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn frame(meta: &GsmtapMeta, payload: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(ENCAP + payload.len());
    f.extend_from_slice(&[0; 12]);
    f.extend_from_slice(&0x0800u16.to_be_bytes());

    let ip_len = (IPV4 + UDP + GSMTAP + payload.len()) as u16;
    let mut ip = [0u8; IPV4];
    ip[0] = 0x45;
    ip[2..4].copy_from_slice(&ip_len.to_be_bytes());
    ip[8] = 64;
    ip[9] = 17;
    ip[12..16].copy_from_slice(&[127, 0, 0, 1]);
    ip[16..20].copy_from_slice(&[127, 0, 0, 1]);
    let ck = ipv4_checksum(&ip);
    ip[10..12].copy_from_slice(&ck.to_be_bytes());
    f.extend_from_slice(&ip);

    f.extend_from_slice(&GSMTAP_PORT.to_be_bytes());
    f.extend_from_slice(&GSMTAP_PORT.to_be_bytes());
    f.extend_from_slice(&((UDP + GSMTAP + payload.len()) as u16).to_be_bytes());
    f.extend_from_slice(&[0, 0]);

    f.push(GSMTAP_VERSION);
    f.push(GSMTAP_HDR_WORDS);
    f.push(meta.kind);
    f.push(0); // timeslot
    f.extend_from_slice(&meta.arfcn.to_be_bytes());
    f.extend_from_slice(&[0, 0]); // signal dbm, snr db
    f.extend_from_slice(&meta.frame_number.to_be_bytes());
    f.push(meta.sub_type);
    f.extend_from_slice(&[0, 0, 0]); // antenna, sub-slot, reserved

    f.extend_from_slice(payload);
    f
}

/// Writes one record per input. Nothing is written if any input is too large.
pub fn export<I: AsRef<[u8]>>(inputs: &[I], meta: &GsmtapMeta, out: &mut impl Write) -> Result<(), PcapError> {
    if let Some((index, len)) = inputs.iter().map(|i| i.as_ref().len()).enumerate().find(|&(_, l)| l > MAX_PAYLOAD) {
        return Err(PcapError::Oversize { index, len });
    }
    out.write_all(&to_bytes_unchecked(inputs, meta))?;
    Ok(())
}

pub fn to_bytes<I: AsRef<[u8]>>(inputs: &[I], meta: &GsmtapMeta) -> Result<Vec<u8>, PcapError> {
    let mut v = Vec::new();
    export(inputs, meta, &mut v)?;
    Ok(v)
}

fn to_bytes_unchecked<I: AsRef<[u8]>>(inputs: &[I], meta: &GsmtapMeta) -> Vec<u8> {
    let mut v = Vec::new();
    v.extend_from_slice(&MAGIC.to_le_bytes());
    v.extend_from_slice(&2u16.to_le_bytes());
    v.extend_from_slice(&4u16.to_le_bytes());
    v.extend_from_slice(&0i32.to_le_bytes());
    v.extend_from_slice(&0u32.to_le_bytes());
    v.extend_from_slice(&SNAPLEN.to_le_bytes());
    v.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    for (i, input) in inputs.iter().enumerate() {
        let f = frame(meta, input.as_ref());
        v.extend_from_slice(&(i as u32).to_le_bytes());
        v.extend_from_slice(&0u32.to_le_bytes());
        v.extend_from_slice(&(f.len() as u32).to_le_bytes());
        v.extend_from_slice(&(f.len() as u32).to_le_bytes());
        v.extend_from_slice(&f);
    }
    v
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], PcapError> {
        if self.buf.len() - self.pos < n {
            return Err(bad(self.buf.len(), format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn bad(offset: usize, msg: impl Into<String>) -> PcapError {
    PcapError::Malformed { offset, msg: msg.into() }
}

fn le32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().unwrap())
}

fn be16(b: &[u8]) -> u16 {
    u16::from_be_bytes(b[..2].try_into().unwrap())
}

/// Parses a capture in the layout [`export`] writes.
pub fn read_back(file: &[u8]) -> Result<Vec<(GsmtapMeta, Vec<u8>)>, PcapError> {
    let mut c = Cursor { buf: file, pos: 0 };
    let g = c.take(GLOBAL_HDR, "global header")?;
    if le32(g) != MAGIC {
        return Err(bad(0, "bad magic"));
    }
    if g[4..8] != [2, 0, 4, 0] {
        return Err(bad(4, "unsupported version"));
    }
    if le32(&g[20..]) != LINKTYPE_ETHERNET {
        return Err(bad(20, "linktype is not ethernet"));
    }
    let mut out = Vec::new();
    while c.pos < file.len() {
        let rec_at = c.pos;
        let r = c.take(REC_HDR, "record header")?;
        let incl = le32(&r[8..]) as usize;
        if le32(&r[12..]) as usize != incl {
            return Err(bad(rec_at + 12, "orig_len differs from incl_len"));
        }
        let base = c.pos;
        let f = c.take(incl, "record body")?;
        out.push(parse_frame(f, base)?);
    }
    Ok(out)
}

fn parse_frame(f: &[u8], base: usize) -> Result<(GsmtapMeta, Vec<u8>), PcapError> {
    if f.len() < ENCAP {
        return Err(bad(base + f.len(), "frame shorter than encapsulation"));
    }
    if be16(&f[12..]) != 0x0800 {
        return Err(bad(base + 12, "ethertype is not ipv4"));
    }
    let ip = &f[ETH..ETH + IPV4];
    let ip_at = base + ETH;
    if ip[0] != 0x45 {
        return Err(bad(ip_at, "unsupported ipv4 header"));
    }
    if usize::from(be16(&ip[2..])) != f.len() - ETH {
        return Err(bad(ip_at + 2, "ipv4 total length mismatch"));
    }
    if ip[9] != 17 {
        return Err(bad(ip_at + 9, "not udp"));
    }
    if ipv4_checksum(ip) != 0 {
        return Err(bad(ip_at + 10, "bad ipv4 checksum"));
    }
    let udp = &f[ETH + IPV4..ETH + IPV4 + UDP];
    let udp_at = ip_at + IPV4;
    if be16(&udp[2..]) != GSMTAP_PORT {
        return Err(bad(udp_at + 2, "not gsmtap port"));
    }
    if usize::from(be16(&udp[4..])) != f.len() - ETH - IPV4 {
        return Err(bad(udp_at + 4, "udp length mismatch"));
    }
    let gt = &f[ETH + IPV4 + UDP..ENCAP];
    let gt_at = udp_at + UDP;
    if gt[0] != GSMTAP_VERSION {
        return Err(bad(gt_at, "gsmtap version"));
    }
    if gt[1] != GSMTAP_HDR_WORDS {
        return Err(bad(gt_at + 1, "gsmtap header length"));
    }
    let meta = GsmtapMeta {
        kind: gt[2],
        sub_type: gt[12],
        arfcn: be16(&gt[4..]),
        frame_number: u32::from_be_bytes(gt[8..12].try_into().unwrap()),
    };
    Ok((meta, f[ENCAP..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> GsmtapMeta {
        GsmtapMeta { kind: GSMTAP_TYPE_LTE_RRC, sub_type: 4, arfcn: 0x1234, frame_number: 0xdeadbeef }
    }

    #[test]
    fn single_19_byte_record() {
        let f = to_bytes(&[[0x5au8; 19]], &meta()).unwrap();
        assert_eq!(f.len(), 117);
        assert_eq!(f[..4], [0xd4, 0xc3, 0xb2, 0xa1]);
        let gt = GLOBAL_HDR + REC_HDR + ETH + IPV4 + UDP;
        assert_eq!(f[gt..gt + 2], [2, 4]);
        assert_eq!(f[gt + 2], 0x0d);
    }

    #[test]
    fn channel_names() {
        assert_eq!(channel_code("PCCH"), Some(6));
        assert_eq!(channel_code("bcch_dl_sch"), Some(5));
        assert_eq!(channel_code("17"), Some(17));
        assert_eq!(channel_code("nope"), None);
    }

    #[test]
    fn known_checksum() {
        // 20-byte header from a textbook example
        let h = hex::decode("450000730000400040110000c0a80001c0a800c7").unwrap();
        assert_eq!(ipv4_checksum(&h), 0xb861);
    }

    #[test]
    fn oversize_rejected_before_writing() {
        let mut v = Vec::new();
        let r = export(&[vec![0u8; 3], vec![0u8; MAX_PAYLOAD + 1]], &meta(), &mut v);
        assert!(matches!(r, Err(PcapError::Oversize { index: 1, len: 9001 })));
        assert!(v.is_empty());
        assert!(to_bytes(&[vec![0u8; MAX_PAYLOAD]], &meta()).is_ok());
    }

    #[test]
    fn truncation_reports_offset() {
        let f = to_bytes(&[b"abc".to_vec()], &meta()).unwrap();
        for cut in [10, 30, f.len() - 1] {
            match read_back(&f[..cut]) {
                Err(PcapError::Malformed { offset, .. }) => assert_eq!(offset, cut),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn wrong_total_length_rejected() {
        let mut f = to_bytes(&[b"abcd".to_vec()], &meta()).unwrap();
        let at = GLOBAL_HDR + REC_HDR + ETH + 3;
        f[at] ^= 1;
        match read_back(&f) {
            Err(PcapError::Malformed { offset, .. }) => assert_eq!(offset, at - 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_export_is_header_only() {
        let f = to_bytes::<Vec<u8>>(&[], &meta()).unwrap();
        assert_eq!(f.len(), GLOBAL_HDR);
        assert!(read_back(&f).unwrap().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip(inputs in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD), 0..4),
                      sub in any::<u8>(), arfcn in any::<u16>(), fnr in any::<u32>()) {
            let m = GsmtapMeta { kind: GSMTAP_TYPE_LTE_RRC, sub_type: sub, arfcn, frame_number: fnr };
            let f = to_bytes(&inputs, &m).unwrap();
            let back = read_back(&f).unwrap();
            prop_assert_eq!(back.len(), inputs.len());
            for (i, (bm, p)) in back.iter().enumerate() {
                prop_assert_eq!(bm, &m);
                prop_assert_eq!(p, &inputs[i]);
            }
        }
    }
}
