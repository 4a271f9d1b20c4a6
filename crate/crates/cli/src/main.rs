fn main() -> std::process::ExitCode {
    endoreport_cli::main_with_args(std::env::args_os())
}
