fn main() -> std::process::ExitCode {
    coverforge::cli::main()
}
