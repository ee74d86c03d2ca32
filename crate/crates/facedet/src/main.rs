fn main() -> std::process::ExitCode {
    facedet::cli::main()
}
