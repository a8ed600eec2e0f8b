use std::process::ExitCode;

fn main() -> ExitCode {
    let mut stdout = std::io::stdout().lock();
    match coadapt_cli::run(std::env::args(), &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("coadapt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
