use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Duration;

use crate::error::{Error, Result};

use super::protocol::{decode_message, encode_message, read_message, write_message, FedMessage};

/// A bidirectional, ordered message pipe between two federation parties.
pub trait Link: Send {
    fn send(&mut self, msg: &FedMessage) -> Result<()>;
    /// Blocks until the next message arrives. A closed peer is an error.
    fn recv(&mut self) -> Result<FedMessage>;
}

/// In-process link. Messages still travel as encoded frames so that both
/// transports exercise the same codec.
pub struct ChannelLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn channel_pair() -> (ChannelLink, ChannelLink) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    (ChannelLink { tx: tx_a, rx: rx_a }, ChannelLink { tx: tx_b, rx: rx_b })
}

fn hung_up() -> Error {
    Error::Transport(io::Error::new(io::ErrorKind::ConnectionAborted, "peer hung up"))
}

impl Link for ChannelLink {
    fn send(&mut self, msg: &FedMessage) -> Result<()> {
        self.tx.send(encode_message(msg)).map_err(|_| hung_up())
    }

    fn recv(&mut self) -> Result<FedMessage> {
        let bytes = self.rx.recv().map_err(|_| hung_up())?;
        Ok(decode_message(&bytes)?)
    }
}

pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    peer: SocketAddr,
}

impl TcpLink {
    pub fn from_stream(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        Ok(TcpLink {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            peer,
        })
    }

    /// Waits for one incoming connection.
    pub fn accept(listener: &TcpListener) -> Result<Self> {
        let (stream, _) = listener.accept()?;
        Self::from_stream(stream)
    }

    /// Connects, retrying while the peer is not listening yet.
    pub fn connect(addr: impl ToSocketAddrs, attempts: usize, delay: Duration) -> Result<Self> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no address to connect to");
        for attempt in 0..attempts.max(1) {
            for a in &addrs {
                match TcpStream::connect(a) {
                    Ok(s) => return Self::from_stream(s),
                    Err(e) => last = e,
                }
            }
            if attempt + 1 < attempts {
                std::thread::sleep(delay);
            }
        }
        Err(Error::Transport(last))
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<()> {
        self.reader.get_ref().set_read_timeout(timeout)?;
        Ok(())
    }
}

impl Link for TcpLink {
    fn send(&mut self, msg: &FedMessage) -> Result<()> {
        write_message(&mut self.writer, msg)
    }

    fn recv(&mut self) -> Result<FedMessage> {
        read_message(&mut self.reader)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::protocol::RoundCommand;

    #[test]
    fn channel_roundtrip_and_hangup() {
        let (mut a, mut b) = channel_pair();
        let m = FedMessage::RoundControl {
            round: 4,
            command: RoundCommand::Start,
        };
        a.send(&m).unwrap();
        assert_eq!(b.recv().unwrap(), m);
        drop(a);
        assert!(matches!(b.recv(), Err(Error::Transport(_))));
    }

    #[test]
    fn tcp_roundtrip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let mut link = TcpLink::accept(&listener).unwrap();
            let m = link.recv().unwrap();
            link.send(&m).unwrap();
        });
        let mut client = TcpLink::connect(addr, 5, Duration::from_millis(20)).unwrap();
        let m = FedMessage::RoundControl {
            round: 2,
            command: RoundCommand::Stop,
        };
        client.send(&m).unwrap();
        assert_eq!(client.recv().unwrap(), m);
        server.join().unwrap();
    }
}
