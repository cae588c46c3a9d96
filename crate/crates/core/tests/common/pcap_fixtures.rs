//! Hand-written capture bytes. Every field below is spelled out in hex and
//! decoded by hand in the comments; the expected feature values are derived
//! from those comments, not from the library.

pub fn hex(s: &str) -> Vec<u8> {
    let digits: String = s.chars().filter(|c| c.is_ascii_hexdigit()).collect();
    (0..digits.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&digits[i..i + 2], 16).unwrap())
        .collect()
}

/// Little-endian microsecond global header, Ethernet link type.
pub const GLOBAL_LE_MICRO: &str = "d4c3b2a1 0200 0400 00000000 00000000 ffff0000 01000000";
/// Big-endian nanosecond global header, Ethernet link type.
pub const GLOBAL_BE_NANO: &str = "a1b23c4d 0002 0004 00000000 00000000 0000ffff 00000001";

/// Client 192.168.1.2:50000 -> server 10.0.0.1:443, TCP, window 29200,
/// payload ff 00 80 (3 bytes). Frame length 14 + 20 + 20 + 3 = 57.
pub const FRAME_CLIENT: &str = "
    001122334455 66778899aabb 0800
    45 00 002b 0001 0000 40 06 0000 c0a80102 0a000001
    c350 01bb 00000001 00000000 50 18 7210 0000 0000
    ff0080";

/// Server 10.0.0.1:443 -> client 192.168.1.2:50000, TCP, window 64240,
/// payload 16 03 (2 bytes). Frame length 56.
pub const FRAME_SERVER: &str = "
    66778899aabb 001122334455 0800
    45 00 002a 0002 0000 40 06 0000 0a000001 c0a80102
    01bb c350 00000001 00000004 50 18 faf0 0000 0000
    1603";

/// 172.16.0.5:8080 -> 172.16.0.9:53, UDP, payload aa bb. Frame length 44.
pub const FRAME_UDP: &str = "
    001122334455 66778899aabb 0800
    45 00 001e 0003 0000 40 11 0000 ac100005 ac100009
    1f90 0035 000a 0000
    aabb";

fn record_le(secs: u32, micros: u32, frame: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(secs.to_le_bytes());
    out.extend(micros.to_le_bytes());
    out.extend((frame.len() as u32).to_le_bytes());
    out.extend((frame.len() as u32).to_le_bytes());
    out.extend(frame);
    out
}

fn record_be(secs: u32, nanos: u32, frame: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(secs.to_be_bytes());
    out.extend(nanos.to_be_bytes());
    out.extend((frame.len() as u32).to_be_bytes());
    out.extend((frame.len() as u32).to_be_bytes());
    out.extend(frame);
    out
}

/// Two-packet TCP conversation at t = 1000.25 s and 1000.75 s.
pub fn tcp_capture_le() -> Vec<u8> {
    let mut out = hex(GLOBAL_LE_MICRO);
    out.extend(record_le(1000, 250_000, &hex(FRAME_CLIENT)));
    out.extend(record_le(1000, 750_000, &hex(FRAME_SERVER)));
    out
}

/// The same conversation in a big-endian nanosecond capture.
pub fn tcp_capture_be_nanos() -> Vec<u8> {
    let mut out = hex(GLOBAL_BE_NANO);
    out.extend(record_be(1000, 250_000_000, &hex(FRAME_CLIENT)));
    out.extend(record_be(1000, 750_000_000, &hex(FRAME_SERVER)));
    out
}

/// One UDP datagram at t = 7.5 s.
pub fn udp_capture() -> Vec<u8> {
    let mut out = hex(GLOBAL_LE_MICRO);
    out.extend(record_le(7, 500_000, &hex(FRAME_UDP)));
    out
}

/// Byte offset of the second record in [`tcp_capture_le`]: 24 + 16 + 57.
pub const SECOND_RECORD_OFFSET: u64 = 97;

/// [`tcp_capture_le`] with the last 5 bytes of the second record missing.
pub fn truncated_tail() -> Vec<u8> {
    let full = tcp_capture_le();
    full[..full.len() - 5].to_vec()
}

/// Expected `x_pay` for the TCP conversation with `n_b = 8`:
/// client bytes ff 00 80, then server bytes 16 03, then padding.
pub fn expected_tcp_payload() -> Vec<f64> {
    vec![1.0, 0.0, 128.0 / 255.0, 22.0 / 255.0, 3.0 / 255.0, 0.0, 0.0, 0.0]
}

/// Expected `x_hdr` for the TCP conversation with `n_p = 4`.
pub fn expected_tcp_header() -> Vec<[f64; 4]> {
    vec![
        [3.0 / 1460.0, 29200.0 / 65535.0, 0.0, 0.0],
        [2.0 / 1460.0, 64240.0 / 65535.0, 0.5 / 10.0, 1.0],
        [0.0; 4],
        [0.0; 4],
    ]
}
