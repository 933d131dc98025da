use std::process::ExitCode;

use clap::Parser;
use ego3d_cli::{run, Cli, ErrorRecord};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EGO3D_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests also land here
            let code = e.exit_code();
            if code != 0 {
                let record = ErrorRecord { error: "usage", exit_code: 2, message: e.to_string().trim().to_string(), diagnostics: vec![] };
                eprintln!("{}", serde_json::to_string(&record).expect("error records serialize"));
                return ExitCode::from(2);
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            let record = ErrorRecord::from_anyhow(&e);
            log::error!("{}", record.message);
            eprintln!("{}", serde_json::to_string(&record).expect("error records serialize"));
            ExitCode::from(record.exit_code as u8)
        }
    }
}
