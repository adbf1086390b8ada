//! Modbus TCP application layer: the PLC register image, a pure request
//! handler, and the client-side request/response codec.

use serde::{Deserialize, Serialize};

pub const MBAP_LEN: usize = 7;
/// Largest PDU the protocol allows.
pub const MAX_PDU_LEN: usize = 253;

pub const READ_COILS: u8 = 0x01;
pub const READ_DISCRETE_INPUTS: u8 = 0x02;
pub const READ_HOLDING_REGISTERS: u8 = 0x03;
pub const READ_INPUT_REGISTERS: u8 = 0x04;
pub const WRITE_SINGLE_COIL: u8 = 0x05;
pub const WRITE_SINGLE_REGISTER: u8 = 0x06;
pub const WRITE_MULTIPLE_COILS: u8 = 0x0F;
pub const WRITE_MULTIPLE_REGISTERS: u8 = 0x10;

pub const MAX_READ_BITS: u16 = 2000;
pub const MAX_READ_REGISTERS: u16 = 125;
pub const MAX_WRITE_BITS: u16 = 1968;
pub const MAX_WRITE_REGISTERS: u16 = 123;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ExceptionCode {
    IllegalFunction = 0x01,
    IllegalDataAddress = 0x02,
    IllegalDataValue = 0x03,
    ServerDeviceFailure = 0x04,
}

impl ExceptionCode {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => Self::IllegalFunction,
            0x02 => Self::IllegalDataAddress,
            0x03 => Self::IllegalDataValue,
            0x04 => Self::ServerDeviceFailure,
            _ => return None,
        })
    }
}

/// Framing problems that make a request unanswerable; the connection is closed.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame too short: {0} bytes")]
    Short(usize),
    #[error("protocol id {0} is not Modbus")]
    ProtocolId(u16),
    #[error("MBAP length {declared} does not match {actual} bytes after the length field")]
    Length { declared: usize, actual: usize },
}

/// MBAP header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mbap {
    pub transaction_id: u16,
    pub protocol_id: u16,
    /// Bytes following the length field (unit id + PDU).
    pub length: u16,
    pub unit_id: u8,
}

impl Mbap {
    pub fn parse(b: &[u8]) -> Result<Mbap, FrameError> {
        if b.len() < MBAP_LEN {
            return Err(FrameError::Short(b.len()));
        }
        let h = Mbap {
            transaction_id: u16::from_be_bytes([b[0], b[1]]),
            protocol_id: u16::from_be_bytes([b[2], b[3]]),
            length: u16::from_be_bytes([b[4], b[5]]),
            unit_id: b[6],
        };
        if h.protocol_id != 0 {
            return Err(FrameError::ProtocolId(h.protocol_id));
        }
        if h.length < 2 || h.length as usize > MAX_PDU_LEN + 1 {
            return Err(FrameError::Length {
                declared: h.length as usize,
                actual: b.len() - 6,
            });
        }
        Ok(h)
    }

    /// Total ADU size announced by this header.
    pub fn adu_len(&self) -> usize {
        6 + self.length as usize
    }
}

fn adu(transaction_id: u16, unit_id: u8, pdu: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(MBAP_LEN + pdu.len());
    out.extend_from_slice(&transaction_id.to_be_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&((pdu.len() + 1) as u16).to_be_bytes());
    out.push(unit_id);
    out.extend_from_slice(pdu);
    out
}

const TABLE_SIZE: usize = 1 << 16;

/// Full 16-bit register image of one PLC. Unwritten addresses read as zero.
#[derive(Clone, PartialEq, Eq)]
pub struct PlcState {
    pub unit_id: u8,
    pub coils: Box<[bool]>,
    pub discrete_inputs: Box<[bool]>,
    pub holding_registers: Box<[u16]>,
    pub input_registers: Box<[u16]>,
}

impl std::fmt::Debug for PlcState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlcState")
            .field("unit_id", &self.unit_id)
            .finish_non_exhaustive()
    }
}

impl PlcState {
    pub fn new(unit_id: u8) -> Self {
        PlcState {
            unit_id,
            coils: vec![false; TABLE_SIZE].into_boxed_slice(),
            discrete_inputs: vec![false; TABLE_SIZE].into_boxed_slice(),
            holding_registers: vec![0; TABLE_SIZE].into_boxed_slice(),
            input_registers: vec![0; TABLE_SIZE].into_boxed_slice(),
        }
    }

    pub fn read(&self, addr: crate::plant::ProtocolAddress) -> u16 {
        use crate::plant::Table;
        let a = addr.address as usize;
        match addr.table {
            Table::Coil => self.coils[a] as u16,
            Table::DiscreteInput => self.discrete_inputs[a] as u16,
            Table::HoldingRegister => self.holding_registers[a],
            Table::InputRegister => self.input_registers[a],
        }
    }
}

fn be16(p: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([p[at], p[at + 1]])
}

fn exception(function: u8, code: ExceptionCode) -> Vec<u8> {
    vec![function | 0x80, code as u8]
}

/// Checks quantity then address range, in the order the protocol prescribes.
fn check_range(addr: u16, qty: u16, max: u16) -> Result<(usize, usize), ExceptionCode> {
    if qty == 0 || qty > max {
        return Err(ExceptionCode::IllegalDataValue);
    }
    let start = addr as usize;
    if start + qty as usize > TABLE_SIZE {
        return Err(ExceptionCode::IllegalDataAddress);
    }
    Ok((start, start + qty as usize))
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// Executes one request PDU and returns the response PDU.
pub fn handle_pdu(pdu: &[u8], state: &mut PlcState) -> Vec<u8> {
    let Some(&function) = pdu.first() else {
        return exception(0, ExceptionCode::IllegalFunction);
    };
    let body_ok = |len: usize| pdu.len() == len;
    match function {
        READ_COILS | READ_DISCRETE_INPUTS | READ_HOLDING_REGISTERS | READ_INPUT_REGISTERS => {
            if !body_ok(5) {
                return exception(function, ExceptionCode::IllegalDataValue);
            }
            let (addr, qty) = (be16(pdu, 1), be16(pdu, 3));
            let bits = matches!(function, READ_COILS | READ_DISCRETE_INPUTS);
            let max = if bits { MAX_READ_BITS } else { MAX_READ_REGISTERS };
            let (lo, hi) = match check_range(addr, qty, max) {
                Ok(r) => r,
                Err(code) => return exception(function, code),
            };
            let data = match function {
                READ_COILS => pack_bits(&state.coils[lo..hi]),
                READ_DISCRETE_INPUTS => pack_bits(&state.discrete_inputs[lo..hi]),
                READ_HOLDING_REGISTERS => state.holding_registers[lo..hi]
                    .iter()
                    .flat_map(|r| r.to_be_bytes())
                    .collect(),
                _ => state.input_registers[lo..hi]
                    .iter()
                    .flat_map(|r| r.to_be_bytes())
                    .collect(),
            };
            let mut out = vec![function, data.len() as u8];
            out.extend(data);
            out
        }
        WRITE_SINGLE_COIL => {
            if !body_ok(5) {
                return exception(function, ExceptionCode::IllegalDataValue);
            }
            let (addr, value) = (be16(pdu, 1), be16(pdu, 3));
            let on = match value {
                0xFF00 => true,
                0x0000 => false,
                _ => return exception(function, ExceptionCode::IllegalDataValue),
            };
            state.coils[addr as usize] = on;
            pdu.to_vec()
        }
        WRITE_SINGLE_REGISTER => {
            if !body_ok(5) {
                return exception(function, ExceptionCode::IllegalDataValue);
            }
            state.holding_registers[be16(pdu, 1) as usize] = be16(pdu, 3);
            pdu.to_vec()
        }
        WRITE_MULTIPLE_COILS | WRITE_MULTIPLE_REGISTERS => {
            if pdu.len() < 6 {
                return exception(function, ExceptionCode::IllegalDataValue);
            }
            let (addr, qty, count) = (be16(pdu, 1), be16(pdu, 3), pdu[5] as usize);
            let coils = function == WRITE_MULTIPLE_COILS;
            let max = if coils { MAX_WRITE_BITS } else { MAX_WRITE_REGISTERS };
            let expected = if coils {
                (qty as usize).div_ceil(8)
            } else {
                qty as usize * 2
            };
            if qty == 0 || qty > max || count != expected || pdu.len() != 6 + count {
                return exception(function, ExceptionCode::IllegalDataValue);
            }
            let (lo, hi) = match check_range(addr, qty, max) {
                Ok(r) => r,
                Err(code) => return exception(function, code),
            };
            let data = &pdu[6..];
            if coils {
                for (i, slot) in state.coils[lo..hi].iter_mut().enumerate() {
                    *slot = data[i / 8] & (1 << (i % 8)) != 0;
                }
            } else {
                for (i, slot) in state.holding_registers[lo..hi].iter_mut().enumerate() {
                    *slot = be16(data, i * 2);
                }
            }
            pdu[..5].to_vec()
        }
        _ => exception(function, ExceptionCode::IllegalFunction),
    }
}

/// Answers one complete MBAP-framed request. Any unit id is served and echoed.
pub fn handle_adu(request: &[u8], state: &mut PlcState) -> Result<Vec<u8>, FrameError> {
    let h = Mbap::parse(request)?;
    if request.len() != h.adu_len() {
        return Err(FrameError::Length {
            declared: h.length as usize,
            actual: request.len() - 6,
        });
    }
    let response = handle_pdu(&request[MBAP_LEN..], state);
    Ok(adu(h.transaction_id, h.unit_id, &response))
}

/// A client request. Also the unit recorded by wire taps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    ReadCoils { address: u16, quantity: u16 },
    ReadDiscreteInputs { address: u16, quantity: u16 },
    ReadHoldingRegisters { address: u16, quantity: u16 },
    ReadInputRegisters { address: u16, quantity: u16 },
    WriteSingleCoil { address: u16, value: bool },
    WriteSingleRegister { address: u16, value: u16 },
    WriteMultipleCoils { address: u16, values: Vec<bool> },
    WriteMultipleRegisters { address: u16, values: Vec<u16> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Bits(Vec<bool>),
    Registers(Vec<u16>),
    Written,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResponseError {
    #[error("exception 0x{code:02x} for function 0x{function:02x}")]
    Exception { function: u8, code: u8 },
    #[error("transaction id {got} does not match request {expected}")]
    Transaction { expected: u16, got: u16 },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

impl Request {
    pub fn function(&self) -> u8 {
        match self {
            Request::ReadCoils { .. } => READ_COILS,
            Request::ReadDiscreteInputs { .. } => READ_DISCRETE_INPUTS,
            Request::ReadHoldingRegisters { .. } => READ_HOLDING_REGISTERS,
            Request::ReadInputRegisters { .. } => READ_INPUT_REGISTERS,
            Request::WriteSingleCoil { .. } => WRITE_SINGLE_COIL,
            Request::WriteSingleRegister { .. } => WRITE_SINGLE_REGISTER,
            Request::WriteMultipleCoils { .. } => WRITE_MULTIPLE_COILS,
            Request::WriteMultipleRegisters { .. } => WRITE_MULTIPLE_REGISTERS,
        }
    }

    pub fn is_write(&self) -> bool {
        self.function() >= WRITE_SINGLE_COIL
    }

    pub fn pdu(&self) -> Vec<u8> {
        let mut p = vec![self.function()];
        let mut put = |v: u16| p.extend_from_slice(&v.to_be_bytes());
        match self {
            Request::ReadCoils { address, quantity }
            | Request::ReadDiscreteInputs { address, quantity }
            | Request::ReadHoldingRegisters { address, quantity }
            | Request::ReadInputRegisters { address, quantity } => {
                put(*address);
                put(*quantity);
            }
            Request::WriteSingleCoil { address, value } => {
                put(*address);
                put(if *value { 0xFF00 } else { 0 });
            }
            Request::WriteSingleRegister { address, value } => {
                put(*address);
                put(*value);
            }
            Request::WriteMultipleCoils { address, values } => {
                put(*address);
                put(values.len() as u16);
                let packed = pack_bits(values);
                p.push(packed.len() as u8);
                p.extend(packed);
            }
            Request::WriteMultipleRegisters { address, values } => {
                put(*address);
                put(values.len() as u16);
                p.push((values.len() * 2) as u8);
                for v in values {
                    p.extend_from_slice(&v.to_be_bytes());
                }
            }
        }
        p
    }

    pub fn encode(&self, transaction_id: u16, unit_id: u8) -> Vec<u8> {
        adu(transaction_id, unit_id, &self.pdu())
    }

    /// Decodes a full response ADU for this request.
    pub fn decode(&self, transaction_id: u16, adu_bytes: &[u8]) -> Result<Response, ResponseError> {
        let h = Mbap::parse(adu_bytes)?;
        if h.transaction_id != transaction_id {
            return Err(ResponseError::Transaction {
                expected: transaction_id,
                got: h.transaction_id,
            });
        }
        let pdu = &adu_bytes[MBAP_LEN..];
        let malformed = |m: &str| ResponseError::Malformed(m.to_string());
        let f = *pdu.first().ok_or_else(|| malformed("empty PDU"))?;
        if f == self.function() | 0x80 {
            let code = *pdu.get(1).ok_or_else(|| malformed("exception without code"))?;
            return Err(ResponseError::Exception {
                function: self.function(),
                code,
            });
        }
        if f != self.function() {
            return Err(malformed("function code mismatch"));
        }
        match self {
            Request::ReadCoils { quantity, .. } | Request::ReadDiscreteInputs { quantity, .. } => {
                let n = *quantity as usize;
                if pdu.len() < 2 || pdu[1] as usize != n.div_ceil(8) || pdu.len() != 2 + pdu[1] as usize {
                    return Err(malformed("bit payload length"));
                }
                Ok(Response::Bits(
                    (0..n).map(|i| pdu[2 + i / 8] & (1 << (i % 8)) != 0).collect(),
                ))
            }
            Request::ReadHoldingRegisters { quantity, .. } | Request::ReadInputRegisters { quantity, .. } => {
                let n = *quantity as usize;
                if pdu.len() != 2 + 2 * n || pdu[1] as usize != 2 * n {
                    return Err(malformed("register payload length"));
                }
                Ok(Response::Registers((0..n).map(|i| be16(pdu, 2 + 2 * i)).collect()))
            }
            _ => {
                if pdu.len() != 5 {
                    return Err(malformed("write echo length"));
                }
                Ok(Response::Written)
            }
        }
    }
}
