//! Tokio TCP front end: one NDJSON request per line, one response line per
//! request, in order per connection. Generation runs on blocking worker
//! threads behind a semaphore sized by the configured worker count.

use std::sync::Arc;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::Semaphore;

use crate::error::{Result, ServiceError};
use crate::protocol::{
    encode, parse_inbound, salvage_request_id, ControlAck, ControlRequest, Inbound, Outbound, WireRequest,
    WireResponse,
};
use crate::service::{Service, Step};

#[derive(Clone)]
pub struct Server {
    service: Arc<Service>,
    permits: Arc<Semaphore>,
}

impl Server {
    pub fn new(service: Arc<Service>) -> Self {
        let workers = service.config().workers;
        Self {
            service,
            permits: Arc::new(Semaphore::new(workers)),
        }
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    pub async fn explain(&self, req: &WireRequest) -> Result<WireResponse> {
        match self.service.begin(req)? {
            Step::Done(resp) => Ok(resp),
            Step::Miss(miss) => {
                let _permit = self
                    .permits
                    .acquire()
                    .await
                    .map_err(|e| ServiceError::Internal(e.to_string()))?;
                let job = miss.job();
                let pipeline = self.service.pipeline().clone();
                let expl = tokio::task::spawn_blocking(move || Service::generate(&pipeline, job))
                    .await
                    .map_err(|e| ServiceError::Internal(e.to_string()))??;
                self.service.complete(miss, expl)
            }
        }
    }

    fn control(&self, c: ControlRequest) -> Result<ControlAck> {
        match c {
            ControlRequest::RegisterModel { definition } => {
                let v = self.service.register_definition(&definition)?;
                Ok(ControlAck {
                    op: "register_model".into(),
                    model_id: definition.model_id,
                    model_version: v,
                })
            }
            ControlRequest::BumpModel {
                model_id,
                magnitude,
                seed,
            } => {
                let v = self.service.bump_model(&model_id, magnitude, seed)?;
                Ok(ControlAck {
                    op: "bump_model".into(),
                    model_id,
                    model_version: v,
                })
            }
        }
    }

    /// Process one inbound line into one outbound message.
    pub async fn process_line(&self, line: &str) -> Outbound {
        match parse_inbound(line) {
            Err(e) => Outbound::Error(e.to_wire(salvage_request_id(line))),
            Ok(Inbound::Explain(req)) => match self.explain(&req).await {
                Ok(resp) => Outbound::Response(resp),
                Err(e) => Outbound::Error(e.to_wire(Some(req.request_id))),
            },
            Ok(Inbound::Control(c)) => match self.control(c) {
                Ok(ack) => Outbound::Ack(ack),
                Err(e) => Outbound::Error(e.to_wire(None)),
            },
        }
    }

    async fn connection(self, stream: TcpStream) -> std::io::Result<()> {
        let (read, mut write) = stream.into_split();
        let mut lines = BufReader::new(read).lines();
        while let Some(line) = lines.next_line().await? {
            if line.trim().is_empty() {
                continue;
            }
            let mut out = encode(&self.process_line(&line).await);
            out.push('\n');
            write.write_all(out.as_bytes()).await?;
        }
        Ok(())
    }

    /// Accept connections until the listener fails.
    pub async fn run(self, listener: TcpListener) -> std::io::Result<()> {
        loop {
            let (stream, _) = listener.accept().await?;
            let server = self.clone();
            tokio::spawn(async move {
                // A broken connection only affects its own client.
                let _ = server.connection(stream).await;
            });
        }
    }
}
