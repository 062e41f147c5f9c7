//! Newline-delimited JSON transport for the session service: one command
//! frame per line in, one event frame per line out.

use std::io::{self, BufRead, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use anyhow::Result;
use gbp_core::session::SessionService;

fn pump(service: &SessionService, input: impl BufRead, output: impl Write) -> io::Result<()> {
    let mut output = BufWriter::new(output);
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", service.handle_frame(&line))?;
        output.flush()?;
    }
    Ok(())
}

pub fn stdio() -> Result<()> {
    let service = SessionService::new();
    pump(&service, io::stdin().lock(), io::stdout().lock())?;
    Ok(())
}

/// Sessions are shared by all connections, so a client may reconnect and resume.
pub fn tcp(addr: &str) -> Result<()> {
    let listener = TcpListener::bind(addr)?;
    eprintln!("listening on {}", listener.local_addr()?);
    let service = Arc::new(SessionService::new());
    for stream in listener.incoming() {
        let stream = stream?;
        let service = Arc::clone(&service);
        thread::spawn(move || {
            if let Err(e) = connection(&service, stream) {
                eprintln!("connection closed: {e}");
            }
        });
    }
    Ok(())
}

fn connection(service: &SessionService, stream: TcpStream) -> io::Result<()> {
    let reader = io::BufReader::new(stream.try_clone()?);
    pump(service, reader, stream)
}
