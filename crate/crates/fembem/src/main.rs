fn main() {
    fembem::runner::main()
}
