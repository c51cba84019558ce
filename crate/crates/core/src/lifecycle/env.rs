use std::collections::HashSet;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use uuid::Uuid;

/// Backend-specific network the components of one simulation share.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetworkHandle {
    /// Child processes on the host loopback interface.
    Loopback,
    /// A container engine bridge network.
    Container {
        network_id: String,
        name: String,
        /// Engine endpoint the network lives on.
        engine: String,
    },
}

/// Hands out ports that were free at allocation time and never repeats one
/// within the same allocator.
#[derive(Debug)]
pub struct PortAllocator {
    bind_ip: IpAddr,
    issued: Mutex<HashSet<u16>>,
}

impl PortAllocator {
    pub fn new(bind_ip: IpAddr) -> Self {
        PortAllocator {
            bind_ip,
            issued: Mutex::new(HashSet::new()),
        }
    }

    pub fn loopback() -> Self {
        Self::new(IpAddr::V4(Ipv4Addr::LOCALHOST))
    }

    pub fn allocate(&self) -> io::Result<u16> {
        for _ in 0..64 {
            let port = TcpListener::bind((self.bind_ip, 0))?.local_addr()?.port();
            if self.issued.lock().unwrap().insert(port) {
                return Ok(port);
            }
        }
        Err(io::Error::new(
            io::ErrorKind::AddrInUse,
            "could not find an unissued port",
        ))
    }

    /// Marks a port chosen elsewhere as taken. Returns false if it was
    /// already issued.
    pub fn reserve(&self, port: u16) -> bool {
        self.issued.lock().unwrap().insert(port)
    }

    pub fn bind_ip(&self) -> IpAddr {
        self.bind_ip
    }

    /// Every port issued so far.
    pub fn issued(&self) -> Vec<u16> {
        let mut ports: Vec<u16> = self.issued.lock().unwrap().iter().copied().collect();
        ports.sort_unstable();
        ports
    }
}

/// Context handed to [`Component::start`](super::Component::start).
#[derive(Debug, Clone)]
pub struct ExecutionEnvironment {
    pub simulation_id: Uuid,
    /// Where components reach the message broker.
    pub broker_address: SocketAddr,
    pub ports: Arc<PortAllocator>,
    pub network: NetworkHandle,
    /// Scratch directory that lives as long as the simulation.
    pub workdir: PathBuf,
}
