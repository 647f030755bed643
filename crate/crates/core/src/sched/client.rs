use std::io::BufReader;
use std::net::TcpStream;

use uuid::Uuid;

use super::wire::{read_frame, write_frame, Message};
use super::{JobSummary, TaskSpec};
use crate::error::{Error, Result};

/// Client connection for submitting jobs and polling their status.
pub struct MasterClient {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl MasterClient {
    pub fn connect(addr: &str) -> Result<MasterClient> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Connection(format!("connect {addr}: {e}")))?;
        stream.set_nodelay(true)?;
        Ok(MasterClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn call(&mut self, msg: &Message) -> Result<Message> {
        write_frame(&mut self.writer, msg)?;
        match read_frame(&mut self.reader)? {
            Some(Message::Error { kind, message }) => Err(Message::into_error(kind, message)),
            Some(m) => Ok(m),
            None => Err(Error::Connection("master closed the connection".into())),
        }
    }

    pub fn submit(&mut self, tasks: Vec<TaskSpec>) -> Result<Uuid> {
        match self.call(&Message::Submit { tasks })? {
            Message::Submitted { job_id } => Ok(job_id),
            other => Err(Error::Protocol(format!("expected SUBMITTED, got {other:?}"))),
        }
    }

    fn status_inner(&mut self, job_id: Uuid, wait: bool) -> Result<JobSummary> {
        match self.call(&Message::Status { job_id, wait })? {
            Message::Job { summary } => Ok(summary),
            other => Err(Error::Protocol(format!("expected JOB, got {other:?}"))),
        }
    }

    pub fn status(&mut self, job_id: Uuid) -> Result<JobSummary> {
        self.status_inner(job_id, false)
    }

    /// Blocks until the job finishes.
    pub fn wait(&mut self, job_id: Uuid) -> Result<JobSummary> {
        self.status_inner(job_id, true)
    }

    pub fn shutdown(mut self) -> Result<()> {
        match self.call(&Message::Shutdown)? {
            Message::Shutdown => Ok(()),
            other => Err(Error::Protocol(format!("expected SHUTDOWN, got {other:?}"))),
        }
    }
}
