use std::process::ExitCode;

fn main() -> ExitCode {
    blockdec::cli::main()
}
