//! Streaming reader for classic pcap captures.
//!
//! Accepts the microsecond (`a1b2c3d4`) and nanosecond (`a1b23c4d`) magics in
//! either byte order. Link, network and transport headers are decoded with
//! `etherparse`; frames without an IPv4/IPv6 header are skipped and counted.

use std::io::{self, Read};
use std::net::IpAddr;

use etherparse::{NetSlice, SlicedPacket, TransportSlice};

use super::IngestError;

const MAGIC_MICRO: u32 = 0xA1B2_C3D4;
const MAGIC_NANO: u32 = 0xA1B2_3C4D;
const MAGIC_PCAPNG: u32 = 0x0A0D_0D0A;
const GLOBAL_HEADER_LEN: u64 = 24;
const RECORD_HEADER_LEN: usize = 16;
/// Refuse records larger than this regardless of the declared snap length.
const MAX_RECORD_LEN: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
    RawIp,
    LinuxSll,
}

impl LinkType {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(Self::Ethernet),
            12 | 14 | 101 | 228 | 229 => Some(Self::RawIp),
            113 => Some(Self::LinuxSll),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransportInfo {
    pub protocol: Protocol,
    pub src_port: u16,
    pub dst_port: u16,
    /// Zero for UDP.
    pub window: u16,
}

/// One IP packet from the capture.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    /// Seconds since the epoch.
    pub timestamp: f64,
    pub src: IpAddr,
    pub dst: IpAddr,
    /// `None` when the transport layer is neither TCP nor UDP or failed to decode.
    pub transport: Option<TransportInfo>,
    /// Transport-layer payload bytes.
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Format {
    big_endian: bool,
    nanos: bool,
}

pub struct PcapReader<R> {
    inner: R,
    format: Format,
    link: LinkType,
    offset: u64,
    skipped_non_ip: usize,
    done: bool,
}

/// Fills `buf` as far as possible; returns the number of bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<R: Read> PcapReader<R> {
    /// Reads and validates the 24-byte global header.
    pub fn new(mut inner: R) -> Result<Self, IngestError> {
        let mut hdr = [0u8; GLOBAL_HEADER_LEN as usize];
        let got = read_full(&mut inner, &mut hdr)?;
        if got >= 4 {
            let le = u32::from_le_bytes(hdr[..4].try_into().expect("4 bytes"));
            if le == MAGIC_PCAPNG {
                return Err(IngestError::UnsupportedFormat("pcapng captures are not supported; convert to classic pcap".into()));
            }
        }
        if got < hdr.len() {
            return Err(IngestError::Truncated {
                offset: got as u64,
                what: "global header".into(),
            });
        }
        let raw = u32::from_le_bytes(hdr[..4].try_into().expect("4 bytes"));
        let format = match (raw, raw.swap_bytes()) {
            (MAGIC_MICRO, _) => Format { big_endian: false, nanos: false },
            (MAGIC_NANO, _) => Format { big_endian: false, nanos: true },
            (_, MAGIC_MICRO) => Format { big_endian: true, nanos: false },
            (_, MAGIC_NANO) => Format { big_endian: true, nanos: true },
            _ => return Err(IngestError::UnsupportedFormat(format!("unknown capture magic {raw:#010x}"))),
        };
        let word = |b: &[u8]| {
            let b: [u8; 4] = b.try_into().expect("4 bytes");
            if format.big_endian {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        let code = word(&hdr[20..24]);
        let link = LinkType::from_code(code)
            .ok_or_else(|| IngestError::UnsupportedFormat(format!("unsupported link type {code}")))?;
        Ok(Self {
            inner,
            format,
            link,
            offset: GLOBAL_HEADER_LEN,
            skipped_non_ip: 0,
            done: false,
        })
    }

    pub fn link_type(&self) -> LinkType {
        self.link
    }

    pub fn nanosecond_resolution(&self) -> bool {
        self.format.nanos
    }

    /// Frames skipped because they carried no IP header.
    pub fn skipped_non_ip(&self) -> usize {
        self.skipped_non_ip
    }

    fn word(&self, b: &[u8]) -> u32 {
        let b: [u8; 4] = b.try_into().expect("4 bytes");
        if self.format.big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }

    /// Next raw record as `(timestamp, frame bytes)`, or `None` at a clean end.
    fn next_record(&mut self) -> Result<Option<(f64, Vec<u8>)>, IngestError> {
        let record_start = self.offset;
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut hdr)?;
        if got == 0 {
            return Ok(None);
        }
        if got < RECORD_HEADER_LEN {
            return Err(IngestError::Truncated {
                offset: record_start,
                what: format!("record header ({got} of {RECORD_HEADER_LEN} bytes)"),
            });
        }
        let secs = self.word(&hdr[0..4]);
        let frac = self.word(&hdr[4..8]);
        let incl = self.word(&hdr[8..12]);
        if incl > MAX_RECORD_LEN {
            return Err(IngestError::Malformed {
                offset: record_start,
                reason: format!("record length {incl} exceeds {MAX_RECORD_LEN}"),
            });
        }
        let mut data = vec![0u8; incl as usize];
        let got = read_full(&mut self.inner, &mut data)?;
        if got < data.len() {
            return Err(IngestError::Truncated {
                offset: record_start,
                what: format!("record body ({got} of {incl} bytes)"),
            });
        }
        self.offset += (RECORD_HEADER_LEN + data.len()) as u64;
        let ticks = if self.format.nanos { 1e9 } else { 1e6 };
        Ok(Some((secs as f64 + frac as f64 / ticks, data)))
    }

    fn decode(&self, timestamp: f64, frame: &[u8]) -> Option<Packet> {
        let sliced = match self.link {
            LinkType::Ethernet => SlicedPacket::from_ethernet(frame),
            LinkType::RawIp => SlicedPacket::from_ip(frame),
            LinkType::LinuxSll => SlicedPacket::from_linux_sll(frame),
        }
        .ok()?;
        let (src, dst) = match sliced.net.as_ref()? {
            NetSlice::Ipv4(ip) => (IpAddr::from(ip.header().source()), IpAddr::from(ip.header().destination())),
            NetSlice::Ipv6(ip) => (IpAddr::from(ip.header().source()), IpAddr::from(ip.header().destination())),
        };
        let (transport, payload) = match &sliced.transport {
            Some(TransportSlice::Tcp(tcp)) => (
                Some(TransportInfo {
                    protocol: Protocol::Tcp,
                    src_port: tcp.source_port(),
                    dst_port: tcp.destination_port(),
                    window: tcp.window_size(),
                }),
                tcp.payload().to_vec(),
            ),
            Some(TransportSlice::Udp(udp)) => (
                Some(TransportInfo {
                    protocol: Protocol::Udp,
                    src_port: udp.source_port(),
                    dst_port: udp.destination_port(),
                    window: 0,
                }),
                udp.payload().to_vec(),
            ),
            _ => (None, Vec::new()),
        };
        Some(Packet {
            timestamp,
            src,
            dst,
            transport,
            payload,
        })
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<Packet, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            match self.next_record() {
                Ok(Some((ts, frame))) => match self.decode(ts, &frame) {
                    Some(p) => return Some(Ok(p)),
                    None => self.skipped_non_ip += 1,
                },
                Ok(None) => self.done = true,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
        None
    }
}

/// Opens a capture from any byte stream.
pub fn parse_pcap<R: Read>(stream: R) -> Result<PcapReader<R>, IngestError> {
    PcapReader::new(stream)
}
